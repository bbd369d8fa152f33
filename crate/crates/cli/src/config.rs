//! Run configuration: flat `section.key=value` text, one file per arm.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use equivar_core::data::AugmentationSpec;
use equivar_core::group::GroupKind;
use equivar_core::nn::{BackboneConfig, Schedule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Context,
    Jigsaw,
    Moco,
    Swav,
    Simsiam,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Context, Task::Jigsaw, Task::Moco, Task::Swav, Task::Simsiam];

    pub fn name(self) -> &'static str {
        match self {
            Task::Context => "context",
            Task::Jigsaw => "jigsaw",
            Task::Moco => "moco",
            Task::Swav => "swav",
            Task::Simsiam => "simsiam",
        }
    }

    pub fn is_pretext(self) -> bool {
        matches!(self, Task::Context | Task::Jigsaw)
    }

    /// Infimum of the loss, used to normalize loss drops.
    pub fn loss_floor(self) -> f64 {
        match self {
            Task::Simsiam => -1.0,
            _ => 0.0,
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?} (context, jigsaw, moco, swav, simsiam)"))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (f32, f64)")),
        }
    }
}

/// The three columns of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    EquivariantInvariant,
    EquivariantOnly,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::EquivariantInvariant => "equivariant+invariant",
            Arm::EquivariantOnly => "equivariant-only",
        }
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Arm::Baseline, Arm::EquivariantInvariant, Arm::EquivariantOnly]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        classes: usize,
        per_class: usize,
        extent: usize,
        seed: u64,
    },
    /// Stem of an `.eqt` / `.labels` pair.
    File(PathBuf),
    /// Directory of PPM images.
    Ppm(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub task: Task,
    pub precision: Precision,

    pub group: GroupKind,
    pub equivariant_model: bool,
    pub invariant_loss: bool,
    pub widths: Vec<usize>,
    pub pool_after: Vec<bool>,
    pub stem_pool: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    pub scale_widths: bool,
    /// Per-patch hidden width of the pretext head.
    pub hidden: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub residual_every: usize,
    pub residual_batch: usize,

    pub data: DataSource,
    pub aug: AugmentationSpec,

    pub tau: f64,
    pub key_momentum: f64,
    pub queue: usize,
    pub prototypes: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    pub small_crops: usize,
    pub small_extent: usize,

    pub gap: usize,
    pub jitter: usize,
    pub orbits: usize,
    pub subset_seed: u64,
    pub subset: Option<PathBuf>,

    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub probe_group_average: bool,
    pub probe_holdout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            task: Task::Simsiam,
            precision: Precision::F32,
            group: GroupKind::Rot4Flip,
            equivariant_model: true,
            invariant_loss: true,
            widths: vec![8, 16, 16],
            pool_after: vec![false, true, false],
            stem_pool: 2,
            kernel: 3,
            batch_norm: true,
            scale_widths: true,
            hidden: 16,
            proj_hidden: 32,
            proj_out: 16,
            pred_hidden: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            milestones: Vec::new(),
            gamma: 0.1,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            residual_every: 25,
            residual_batch: 16,
            data: DataSource::Synth {
                classes: 4,
                per_class: 500,
                extent: 32,
                seed: 0,
            },
            aug: AugmentationSpec::default(),
            tau: 0.2,
            key_momentum: 0.99,
            queue: 1024,
            prototypes: 32,
            sinkhorn_iters: 3,
            sinkhorn_eps: 0.05,
            small_crops: 2,
            small_extent: 16,
            gap: 1,
            jitter: 0,
            orbits: 250,
            subset_seed: 0,
            subset: None,
            probe_epochs: 100,
            probe_lr: 0.1,
            probe_batch: 64,
            probe_group_average: false,
            probe_holdout: 0.2,
        }
    }
}

fn parse<T: FromStr>(field: &'static str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| invalid(field, format!("{v:?}: {e}")))
}

fn parse_list<T: FromStr>(field: &'static str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(field, x)).collect()
}

fn fmt_list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses and validates; keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(k));
            }
        }
        let mut c = Self::default();
        let mut synth = (4usize, 500usize, 32usize, 0u64);
        let mut train_path = None;
        let mut ppm_path = None;
        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "run.name" => c.name = v.to_string(),
                "run.task" => c.task = parse("run.task", v)?,
                "run.precision" => c.precision = parse("run.precision", v)?,
                "model.group" => c.group = v.parse().map_err(|e| invalid("model.group", format!("{e}")))?,
                "model.equivariant_model" => c.equivariant_model = parse("model.equivariant_model", v)?,
                "model.widths" => c.widths = parse_list("model.widths", v)?,
                "model.pool_after" => c.pool_after = parse_list("model.pool_after", v)?,
                "model.stem_pool" => c.stem_pool = parse("model.stem_pool", v)?,
                "model.kernel" => c.kernel = parse("model.kernel", v)?,
                "model.batch_norm" => c.batch_norm = parse("model.batch_norm", v)?,
                "model.scale_widths" => c.scale_widths = parse("model.scale_widths", v)?,
                "model.hidden" => c.hidden = parse("model.hidden", v)?,
                "model.proj_hidden" => c.proj_hidden = parse("model.proj_hidden", v)?,
                "model.proj_out" => c.proj_out = parse("model.proj_out", v)?,
                "model.pred_hidden" => c.pred_hidden = parse("model.pred_hidden", v)?,
                "loss.invariant_loss" => c.invariant_loss = parse("loss.invariant_loss", v)?,
                "loss.tau" => c.tau = parse("loss.tau", v)?,
                "loss.key_momentum" => c.key_momentum = parse("loss.key_momentum", v)?,
                "loss.queue" => c.queue = parse("loss.queue", v)?,
                "loss.prototypes" => c.prototypes = parse("loss.prototypes", v)?,
                "loss.sinkhorn_iters" => c.sinkhorn_iters = parse("loss.sinkhorn_iters", v)?,
                "loss.sinkhorn_eps" => c.sinkhorn_eps = parse("loss.sinkhorn_eps", v)?,
                "loss.small_crops" => c.small_crops = parse("loss.small_crops", v)?,
                "loss.small_extent" => c.small_extent = parse("loss.small_extent", v)?,
                "train.lr" => c.lr = parse("train.lr", v)?,
                "train.momentum" => c.momentum = parse("train.momentum", v)?,
                "train.weight_decay" => c.weight_decay = parse("train.weight_decay", v)?,
                "train.schedule" => {
                    c.schedule = match v {
                        "constant" => ScheduleKind::Constant,
                        "step" => ScheduleKind::Step,
                        "cosine" => ScheduleKind::Cosine,
                        _ => return Err(invalid("train.schedule", format!("{v:?} (constant, step, cosine)"))),
                    }
                }
                "train.milestones" => c.milestones = parse_list("train.milestones", v)?,
                "train.gamma" => c.gamma = parse("train.gamma", v)?,
                "train.epochs" => c.epochs = parse("train.epochs", v)?,
                "train.batch_size" => c.batch_size = parse("train.batch_size", v)?,
                "train.seed" => c.seed = parse("train.seed", v)?,
                "train.residual_every" => c.residual_every = parse("train.residual_every", v)?,
                "train.residual_batch" => c.residual_batch = parse("train.residual_batch", v)?,
                "data.synth" => {
                    let p: Vec<usize> = parse_list("data.synth", v)?;
                    let [classes, per_class, extent] = p[..] else {
                        return Err(invalid("data.synth", "expected classes,per_class,extent"));
                    };
                    (synth.0, synth.1, synth.2) = (classes, per_class, extent);
                }
                "data.seed" => synth.3 = parse("data.seed", v)?,
                "data.train" => train_path = Some(PathBuf::from(v)),
                "data.ppm" => ppm_path = Some(PathBuf::from(v)),
                "aug.crop" => c.aug.crop = parse("aug.crop", v)?,
                "aug.crop_min" => c.aug.crop_min = parse("aug.crop_min", v)?,
                "aug.hflip" => c.aug.hflip = parse("aug.hflip", v)?,
                "aug.rot90" => c.aug.rot90 = parse("aug.rot90", v)?,
                "aug.grayscale" => c.aug.grayscale = parse("aug.grayscale", v)?,
                "aug.seed" => c.aug.seed = parse("aug.seed", v)?,
                "pretext.gap" => c.gap = parse("pretext.gap", v)?,
                "pretext.jitter" => c.jitter = parse("pretext.jitter", v)?,
                "pretext.orbits" => c.orbits = parse("pretext.orbits", v)?,
                "pretext.subset_seed" => c.subset_seed = parse("pretext.subset_seed", v)?,
                "pretext.subset" => c.subset = Some(PathBuf::from(v)),
                "probe.epochs" => c.probe_epochs = parse("probe.epochs", v)?,
                "probe.lr" => c.probe_lr = parse("probe.lr", v)?,
                "probe.batch_size" => c.probe_batch = parse("probe.batch_size", v)?,
                "probe.group_average" => c.probe_group_average = parse("probe.group_average", v)?,
                "probe.holdout" => c.probe_holdout = parse("probe.holdout", v)?,
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        c.data = match (train_path, ppm_path) {
            (Some(_), Some(_)) => return Err(invalid("data.train", "data.train and data.ppm are exclusive")),
            (Some(p), None) => DataSource::File(p),
            (None, Some(p)) => DataSource::Ppm(p),
            (None, None) => DataSource::Synth {
                classes: synth.0,
                per_class: synth.1,
                extent: synth.2,
                seed: synth.3,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.invariant_loss && !self.equivariant_model {
            return Err(invalid(
                "loss.invariant_loss",
                "requires model.equivariant_model=true (group averaging needs the block structure)",
            ));
        }
        if self.task == Task::Context && self.group != GroupKind::Rot4 {
            return Err(invalid(
                "model.group",
                format!("context prediction needs rot4, got {}", self.group.name()),
            ));
        }
        if self.equivariant_model && self.group == GroupKind::Trivial {
            return Err(invalid("model.group", "an equivariant model needs a nontrivial group"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid("model.widths", "need at least one positive width"));
        }
        if self.pool_after.len() != self.widths.len() {
            return Err(invalid("model.pool_after", "one flag per width"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid("model.kernel", "kernel must be odd"));
        }
        if self.stem_pool == 0 {
            return Err(invalid("model.stem_pool", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("train.momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("train.weight_decay", "must be nonnegative"));
        }
        if self.epochs == 0 {
            return Err(invalid("train.epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid("train.batch_size", "must be at least 2"));
        }
        if self.residual_every == 0 || self.residual_batch == 0 {
            return Err(invalid("train.residual_every", "residual cadence and batch must be positive"));
        }
        if self.schedule == ScheduleKind::Step && self.milestones.is_empty() {
            return Err(invalid("train.milestones", "step schedule needs milestones"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("loss.tau", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(invalid("loss.key_momentum", "must lie in [0, 1]"));
        }
        if self.queue == 0 || self.prototypes == 0 || self.sinkhorn_iters == 0 {
            return Err(invalid("loss.queue", "queue, prototypes and sinkhorn_iters must be positive"));
        }
        if self.orbits == 0 {
            return Err(invalid("pretext.orbits", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.probe_holdout) {
            return Err(invalid("probe.holdout", "must lie in [0, 1)"));
        }
        if self.probe_group_average && !self.equivariant_model {
            return Err(invalid("probe.group_average", "requires model.equivariant_model=true"));
        }
        if let DataSource::Synth { extent, .. } = self.data {
            if extent < 16 {
                return Err(invalid("data.synth", "extent must be at least 16"));
            }
        }
        self.aug.validate().map_err(|e| invalid("aug", e.to_string()))?;
        Ok(())
    }

    pub fn arm(&self) -> Arm {
        match (self.equivariant_model, self.invariant_loss) {
            (false, _) => Arm::Baseline,
            (true, true) => Arm::EquivariantInvariant,
            (true, false) => Arm::EquivariantOnly,
        }
    }

    /// Group the model is built over: the trivial group for the baseline.
    pub fn model_group(&self) -> GroupKind {
        if self.equivariant_model {
            self.group
        } else {
            GroupKind::Trivial
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            group: self.model_group(),
            in_channels: 3,
            widths: self.widths.clone(),
            pool_after: self.pool_after.clone(),
            stem_pool: self.stem_pool,
            kernel: self.kernel,
            batch_norm: self.batch_norm,
            scale_widths: self.scale_widths,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Step => Schedule::Step {
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            },
            ScheduleKind::Cosine => Schedule::Cosine { total: total_steps },
        }
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("run.name={}", self.name),
            format!("run.task={}", self.task),
            format!("run.precision={}", self.precision.name()),
            format!("model.group={}", self.group.name()),
            format!("model.equivariant_model={}", self.equivariant_model),
            format!("model.widths={}", fmt_list(&self.widths)),
            format!("model.pool_after={}", fmt_list(&self.pool_after)),
            format!("model.stem_pool={}", self.stem_pool),
            format!("model.kernel={}", self.kernel),
            format!("model.batch_norm={}", self.batch_norm),
            format!("model.scale_widths={}", self.scale_widths),
            format!("model.hidden={}", self.hidden),
            format!("model.proj_hidden={}", self.proj_hidden),
            format!("model.proj_out={}", self.proj_out),
            format!("model.pred_hidden={}", self.pred_hidden),
            format!("loss.invariant_loss={}", self.invariant_loss),
            format!("loss.tau={}", self.tau),
            format!("loss.key_momentum={}", self.key_momentum),
            format!("loss.queue={}", self.queue),
            format!("loss.prototypes={}", self.prototypes),
            format!("loss.sinkhorn_iters={}", self.sinkhorn_iters),
            format!("loss.sinkhorn_eps={}", self.sinkhorn_eps),
            format!("loss.small_crops={}", self.small_crops),
            format!("loss.small_extent={}", self.small_extent),
            format!("train.lr={}", self.lr),
            format!("train.momentum={}", self.momentum),
            format!("train.weight_decay={}", self.weight_decay),
            format!(
                "train.schedule={}",
                match self.schedule {
                    ScheduleKind::Constant => "constant",
                    ScheduleKind::Step => "step",
                    ScheduleKind::Cosine => "cosine",
                }
            ),
            format!("train.milestones={}", fmt_list(&self.milestones)),
            format!("train.gamma={}", self.gamma),
            format!("train.epochs={}", self.epochs),
            format!("train.batch_size={}", self.batch_size),
            format!("train.seed={}", self.seed),
            format!("train.residual_every={}", self.residual_every),
            format!("train.residual_batch={}", self.residual_batch),
        ];
        match &self.data {
            DataSource::Synth {
                classes,
                per_class,
                extent,
                seed,
            } => {
                lines.push(format!("data.synth={classes},{per_class},{extent}"));
                lines.push(format!("data.seed={seed}"));
            }
            DataSource::File(p) => lines.push(format!("data.train={}", p.display())),
            DataSource::Ppm(p) => lines.push(format!("data.ppm={}", p.display())),
        }
        let a = &self.aug;
        lines.extend([
            format!("aug.crop={}", a.crop),
            format!("aug.crop_min={}", a.crop_min),
            format!("aug.hflip={}", a.hflip),
            format!("aug.rot90={}", a.rot90),
            format!("aug.grayscale={}", a.grayscale),
            format!("aug.seed={}", a.seed),
            format!("pretext.gap={}", self.gap),
            format!("pretext.jitter={}", self.jitter),
            format!("pretext.orbits={}", self.orbits),
            format!("pretext.subset_seed={}", self.subset_seed),
        ]);
        if let Some(p) = &self.subset {
            lines.push(format!("pretext.subset={}", p.display()));
        }
        lines.extend([
            format!("probe.epochs={}", self.probe_epochs),
            format!("probe.lr={}", self.probe_lr),
            format!("probe.batch_size={}", self.probe_batch),
            format!("probe.group_average={}", self.probe_group_average),
            format!("probe.holdout={}", self.probe_holdout),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
