//! Pretraining loops for the five objectives and the invariance residual.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use equivar_core::contrastive::{
    moco_forward, moco_step, simsiam_forward, simsiam_step, swav_forward, swav_step, ContrastiveNet,
    ContrastiveNetConfig, MocoConfig, MocoState, Prototypes, SimSiamConfig, SwavConfig, SwavState,
};
use equivar_core::data::{batches, import_ppm_dir, synth_dataset, Augmenter, Dataset};
use equivar_core::group::{apply_grid, FiniteGroup, GridAction, GroupKind};
use equivar_core::nn::{BatchStats, Checkpoint, Mode, ParamStore, Sgd, BN_MOMENTUM};
use equivar_core::pretext::{
    context_label_action, extract_context, extract_jigsaw, generate_closed_subset, pretext_loss,
    stack_patches, HeadKind, PatchClassifier, PatchClassifierConfig, PatchGrid, PermutationSubset,
};
use equivar_core::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, Precision, RunConfig, Task};
use crate::metrics::{MetricsLog, StepRecord, Summary};

const HOLDOUT_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const QUEUE_STREAM: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn load_dataset<T: Scalar>(src: &DataSource) -> Result<Dataset<T>> {
    Ok(match src {
        DataSource::Synth {
            classes,
            per_class,
            extent,
            seed,
        } => synth_dataset(*classes, *per_class, *extent, *seed)?,
        DataSource::File(stem) => {
            Dataset::load(stem).with_context(|| format!("loading dataset {}", stem.display()))?
        }
        DataSource::Ppm(dir) => import_ppm_dir(dir)?,
    })
}

/// Held-out residual batch and the remaining training indices.
pub fn split_holdout(len: usize, held: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if held >= len {
        bail!("residual batch of {held} leaves no training data out of {len}");
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, HOLDOUT_STREAM));
    let train = order.split_off(held);
    Ok((order, train))
}

/// The jigsaw label set: closed under the model group for the
/// equivariant+invariant arm, a plain max-Hamming set otherwise.
pub fn jigsaw_subset(cfg: &RunConfig) -> Result<PermutationSubset> {
    let group = FiniteGroup::new(cfg.group);
    if let Some(p) = &cfg.subset {
        let f = std::fs::File::open(p).with_context(|| format!("opening subset {}", p.display()))?;
        return Ok(PermutationSubset::read(std::io::BufReader::new(f))?);
    }
    Ok(if cfg.invariant_loss {
        generate_closed_subset(&group, cfg.orbits, cfg.subset_seed)?
    } else {
        generate_closed_subset(&FiniteGroup::new(GroupKind::Trivial), cfg.orbits * group.order(), cfg.subset_seed)?
    })
}

struct Pretext<T> {
    task: Task,
    model: PatchClassifier,
    params: ParamStore<T>,
    opt: Sgd<T>,
    grid: PatchGrid,
    subset: Option<PermutationSubset>,
    jitter: usize,
    label_seed: u64,
    held_labels: Vec<usize>,
}

impl<T: Scalar> Pretext<T> {
    fn new(cfg: &RunConfig, extent: usize, held: usize) -> Result<Self> {
        let model_group = FiniteGroup::new(cfg.model_group());
        let grid = PatchGrid::fit(extent, cfg.gap)?;
        let (patches, subset, head) = match cfg.task {
            Task::Context => {
                let head = if cfg.invariant_loss {
                    HeadKind::Equivariant(context_label_action(&model_group)?)
                } else {
                    HeadKind::Plain { labels: 8 }
                };
                (2, None, head)
            }
            _ => {
                let subset = jigsaw_subset(cfg)?;
                let head = if cfg.invariant_loss {
                    if subset.group().kind() != model_group.kind() {
                        bail!("jigsaw subset is closed under {}, model uses {}", subset.group().name(0), model_group.name(0));
                    }
                    HeadKind::Equivariant(subset.label_action()?)
                } else {
                    HeadKind::Plain { labels: subset.len() }
                };
                (9, Some(subset), head)
            }
        };
        let mut params = ParamStore::new();
        let model = PatchClassifier::new(
            PatchClassifierConfig {
                backbone: cfg.backbone(),
                patches,
                hidden: cfg.hidden,
                head,
            },
            &mut params,
            &mut stream_rng(cfg.seed, INIT_STREAM),
        )?;
        model.backbone().check_extent(grid.patch)?;
        let labels = model.label_count();
        let mut r = stream_rng(cfg.seed ^ 0x5EED, LABEL_STREAM);
        let held_labels = (0..held).map(|_| r.random_range(0..labels)).collect();
        Ok(Self {
            task: cfg.task,
            model,
            params,
            opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.schedule(0))?,
            grid,
            subset,
            jitter: cfg.jitter,
            label_seed: cfg.seed,
            held_labels,
        })
    }

    fn inputs(&self, images: &[Tensor<T>], labels: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        let per = images
            .iter()
            .zip(labels)
            .map(|(img, &l)| {
                Ok(match &self.subset {
                    None => {
                        let jitter = match rng.as_deref_mut() {
                            Some(r) if self.jitter > 0 => Some((r, self.jitter)),
                            _ => None,
                        };
                        let s = extract_context(img, l, &self.grid, jitter)?;
                        Tensor::stack(&[s.center, s.neighbor])?
                    }
                    Some(subset) => {
                        let sigma: Vec<usize> = subset.get(l).iter().map(|&c| c as usize).collect();
                        extract_jigsaw(img, &sigma, &self.grid)?.patches
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(stack_patches(&per)?)
    }

    fn loss_value(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let logits = self.model.forward(
            &tape,
            &bound,
            &self.params,
            tape.constant(x.clone()),
            Mode::Train,
            &mut BatchStats::new(),
        )?;
        Ok(tape.value(pretext_loss(&tape, logits, labels)?).item().as_f64())
    }

    fn step(&mut self, data: &Dataset<T>, idx: &[usize], step: usize) -> Result<f64> {
        let mut r = stream_rng(self.label_seed.wrapping_add(step as u64), LABEL_STREAM);
        let labels: Vec<usize> = idx.iter().map(|_| r.random_range(0..self.model.label_count())).collect();
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| data.image(i)).collect();
        let x = self.inputs(&images, &labels, Some(&mut r))?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let mut stats = BatchStats::new();
        let logits = self
            .model
            .forward(&tape, &bound, &self.params, tape.constant(x), Mode::Train, &mut stats)?;
        let loss = pretext_loss(&tape, logits, &labels)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            bail!("{} loss diverged at step {step}: {value}", self.task);
        }
        let grads = tape.backward(loss)?;
        self.opt.step(&mut self.params, &bound, &grads)?;
        stats.commit(&mut self.params, BN_MOMENTUM)?;
        Ok(value)
    }

    /// Largest loss change over g when every held-out image is transformed
    /// and its label acted on; elements whose acted jigsaw label falls
    /// outside the subset are skipped.
    fn residual(&self, held: &Dataset<T>, nominal: &FiniteGroup, action: &GridAction) -> Result<Option<f64>> {
        let images: Vec<Tensor<T>> = (0..held.len()).map(|i| held.image(i)).collect();
        let base = self.loss_value(&self.inputs(&images, &self.held_labels, None)?, &self.held_labels)?;
        let context_action = match self.task {
            Task::Context => Some(context_label_action(nominal)?),
            _ => None,
        };
        let mut worst: Option<f64> = None;
        for g in nominal.elements().filter(|&g| g != nominal.identity()) {
            let labels: Option<Vec<usize>> = self
                .held_labels
                .iter()
                .map(|&l| match (&context_action, &self.subset) {
                    (Some(a), _) => Some(a.apply(g, l)),
                    (None, Some(s)) => s.act(nominal, g, l).ok(),
                    (None, None) => None,
                })
                .collect();
            let Some(labels) = labels else { continue };
            let moved = images
                .iter()
                .map(|x| apply_grid(action, g, x))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let l = self.loss_value(&self.inputs(&moved, &labels, None)?, &labels)?;
            let d = (l - base).abs();
            worst = Some(worst.map_or(d, |w: f64| w.max(d)));
        }
        Ok(worst)
    }
}

enum Objective<T> {
    Moco(MocoState<T>, MocoConfig),
    Swav(SwavState<T>, SwavConfig),
    Simsiam(ParamStore<T>, Sgd<T>, SimSiamConfig),
}

struct Contrast<T> {
    net: ContrastiveNet,
    objective: Objective<T>,
    augmenter: Augmenter,
    extent: usize,
    small_crops: usize,
    small_extent: usize,
    held_views: Vec<Tensor<T>>,
}

impl<T: Scalar> Contrast<T> {
    fn new(cfg: &RunConfig, extent: usize, held: &Dataset<T>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let net = ContrastiveNet::new(
            ContrastiveNetConfig {
                backbone: cfg.backbone(),
                proj_hidden: cfg.proj_hidden,
                proj_out: cfg.proj_out,
                predictor_hidden: (cfg.task == Task::Simsiam).then_some(cfg.pred_hidden),
            },
            &mut params,
            &mut rng,
        )?;
        net.backbone().check_extent(extent)?;
        let opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.schedule(0))?;
        let small_crops = if cfg.task == Task::Swav { cfg.small_crops } else { 0 };
        if small_crops > 0 {
            net.backbone().check_extent(cfg.small_extent)?;
        }
        let objective = match cfg.task {
            Task::Moco => {
                let mc = MocoConfig {
                    tau: cfg.tau,
                    momentum: cfg.key_momentum,
                    queue_size: cfg.queue,
                    invariant: cfg.invariant_loss,
                };
                let mut state = MocoState::new(&net, params, opt, &mc)?;
                state.queue.fill_random(&mut stream_rng(cfg.seed, QUEUE_STREAM))?;
                Objective::Moco(state, mc)
            }
            Task::Swav => {
                let sc = SwavConfig {
                    tau: cfg.tau,
                    eps: cfg.sinkhorn_eps,
                    sinkhorn_iters: cfg.sinkhorn_iters,
                    n_large: 2,
                    prototypes: cfg.prototypes,
                    invariant: cfg.invariant_loss,
                };
                let prototypes = Prototypes::new(&mut params, net.embed_dim(), cfg.prototypes, &mut rng)?;
                Objective::Swav(SwavState { params, prototypes, opt }, sc)
            }
            _ => Objective::Simsiam(params, opt, SimSiamConfig { invariant: cfg.invariant_loss }),
        };
        let mut sizes = vec![extent];
        if small_crops > 0 {
            sizes.push(cfg.small_extent);
        }
        let augmenter = Augmenter::new(cfg.aug, &sizes)?;
        let mut this = Self {
            net,
            objective,
            augmenter,
            extent,
            small_crops,
            small_extent: cfg.small_extent,
            held_views: Vec::new(),
        };
        let all: Vec<usize> = (0..held.len()).collect();
        this.held_views = this.views(held, &all, 0)?;
        Ok(this)
    }

    fn views(&self, data: &Dataset<T>, idx: &[usize], epoch: u64) -> Result<Vec<Tensor<T>>> {
        let mut v = Vec::with_capacity(2 + self.small_crops);
        for view in 0..2 {
            v.push(self.augmenter.batch_view(data, idx, epoch, view, self.extent)?);
        }
        for j in 0..self.small_crops {
            v.push(self.augmenter.batch_view(data, idx, epoch, 2 + j as u64, self.small_extent)?);
        }
        Ok(v)
    }

    fn params(&self) -> &ParamStore<T> {
        match &self.objective {
            Objective::Moco(s, _) => &s.params,
            Objective::Swav(s, _) => &s.params,
            Objective::Simsiam(p, _, _) => p,
        }
    }

    fn opt_mut(&mut self) -> &mut Sgd<T> {
        match &mut self.objective {
            Objective::Moco(s, _) => &mut s.opt,
            Objective::Swav(s, _) => &mut s.opt,
            Objective::Simsiam(_, o, _) => o,
        }
    }

    fn opt(&self) -> &Sgd<T> {
        match &self.objective {
            Objective::Moco(s, _) => &s.opt,
            Objective::Swav(s, _) => &s.opt,
            Objective::Simsiam(_, o, _) => o,
        }
    }

    fn step(&mut self, data: &Dataset<T>, idx: &[usize], epoch: usize) -> Result<f64> {
        let v = self.views(data, idx, epoch as u64)?;
        let net = &self.net;
        Ok(match &mut self.objective {
            Objective::Moco(state, mc) => moco_step(net, state, &v[0], &v[1], mc)?,
            Objective::Swav(state, sc) => swav_step(net, state, &v, sc)?,
            Objective::Simsiam(params, opt, sc) => simsiam_step(net, params, opt, &v[0], &v[1], sc)?,
        })
    }

    fn loss_value(&self, views: &[Tensor<T>]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params().bind(&tape, true);
        let mut stats = BatchStats::new();
        let loss = match &self.objective {
            Objective::Moco(s, mc) => {
                moco_forward(
                    &self.net,
                    &tape,
                    &bound,
                    &s.params,
                    s.key.params(),
                    &s.queue,
                    &views[0],
                    &views[1],
                    mc,
                    &mut stats,
                )?
                .0
            }
            Objective::Swav(s, sc) => swav_forward(&self.net, &tape, &bound, &s.params, s.prototypes, views, sc, &mut stats)?,
            Objective::Simsiam(p, _, sc) => simsiam_forward(&self.net, &tape, &bound, p, &views[0], &views[1], sc, &mut stats)?,
        };
        Ok(tape.value(loss).item().as_f64())
    }

    /// Largest loss change over g when the first view of every held-out
    /// sample is replaced by its transform.
    fn residual(&self, nominal: &FiniteGroup, action: &GridAction) -> Result<Option<f64>> {
        let base = self.loss_value(&self.held_views)?;
        let mut worst = 0.0f64;
        for g in nominal.elements().filter(|&g| g != nominal.identity()) {
            let mut views = self.held_views.clone();
            views[0] = apply_grid(action, g, &views[0])?;
            worst = worst.max((self.loss_value(&views)? - base).abs());
        }
        Ok(Some(worst))
    }
}

enum Learner<T> {
    Pretext(Box<Pretext<T>>),
    Contrast(Box<Contrast<T>>),
}

impl<T: Scalar> Learner<T> {
    fn params(&self) -> &ParamStore<T> {
        match self {
            Learner::Pretext(p) => &p.params,
            Learner::Contrast(c) => c.params(),
        }
    }

    fn opt(&self) -> &Sgd<T> {
        match self {
            Learner::Pretext(p) => &p.opt,
            Learner::Contrast(c) => c.opt(),
        }
    }

    fn set_schedule(&mut self, cfg: &RunConfig, total: usize) {
        let s = cfg.schedule(total);
        match self {
            Learner::Pretext(p) => p.opt.schedule = s,
            Learner::Contrast(c) => c.opt_mut().schedule = s,
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: MetricsLog,
    pub epoch_losses: Vec<f64>,
    pub summary: Summary,
}

/// Fractional loss decrease from the first to the last epoch mean,
/// relative to the distance of the first mean from the loss floor.
pub fn loss_drop(epoch_losses: &[f64], floor: f64) -> f64 {
    match (epoch_losses.first(), epoch_losses.last()) {
        (Some(&first), Some(&last)) if first > floor => (first - last) / (first - floor),
        _ => 0.0,
    }
}

/// Trains per `cfg`, writing `config.txt`, `metrics.csv`, `summary.txt` and
/// `checkpoint/` into `out`.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    match cfg.precision {
        Precision::F32 => pretrain_as::<f32>(cfg, out),
        Precision::F64 => pretrain_as::<f64>(cfg, out),
    }
}

fn pretrain_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let data = load_dataset::<T>(&cfg.data)?;
    let (held_idx, train_idx) = split_holdout(data.len(), cfg.residual_batch, cfg.seed)?;
    let held = data.subset(&held_idx)?;
    let train = data.subset(&train_idx)?;
    let extent = data.extent();

    let nominal = FiniteGroup::new(cfg.group);
    let action = GridAction::new(&nominal, extent)?;
    let mut learner = if cfg.task.is_pretext() {
        Learner::Pretext(Box::new(Pretext::new(cfg, extent, held.len())?))
    } else {
        Learner::Contrast(Box::new(Contrast::new(cfg, extent, &held)?))
    };
    let per_epoch = train.len() / cfg.batch_size;
    if per_epoch == 0 {
        bail!("batch size {} exceeds the {} training samples", cfg.batch_size, train.len());
    }
    let total = per_epoch * cfg.epochs;
    learner.set_schedule(cfg, total);

    let mut log = MetricsLog::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let epoch_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        for idx in batches(train.len(), cfg.batch_size, epoch_seed)? {
            let measure = step.is_multiple_of(cfg.residual_every) || step + 1 == total;
            let inv_residual = if measure {
                match &learner {
                    Learner::Pretext(p) => p.residual(&held, &nominal, &action)?,
                    Learner::Contrast(c) => c.residual(&nominal, &action)?,
                }
            } else {
                None
            };
            let lr = learner.opt().current_lr();
            let loss = match &mut learner {
                Learner::Pretext(p) => p.step(&train, &idx, step)?,
                Learner::Contrast(c) => c.step(&train, &idx, epoch)?,
            };
            log.push(StepRecord {
                step,
                loss,
                inv_residual,
                lr,
            })?;
            sum += loss;
            step += 1;
        }
        epoch_losses.push(sum / per_epoch as f64);
    }
    log.write_csv(&out.join("metrics.csv"))?;

    let mut meta = BTreeMap::new();
    meta.insert("name".to_string(), cfg.name.clone());
    meta.insert("task".to_string(), cfg.task.to_string());
    meta.insert("arm".to_string(), cfg.arm().name().to_string());
    meta.insert("group".to_string(), cfg.model_group().name().to_string());
    meta.insert("steps".to_string(), step.to_string());
    Checkpoint {
        meta,
        params: learner.params().clone(),
    }
    .save(&out.join("checkpoint"))?;

    let mut summary = Summary::default();
    summary.set("name", &cfg.name);
    summary.set("task", cfg.task);
    summary.set("arm", cfg.arm().name());
    summary.set("group", cfg.model_group().name());
    summary.set("precision", cfg.precision.name());
    summary.set("steps", step);
    summary.set("epochs", cfg.epochs);
    summary.set("loss_first_epoch", epoch_losses[0]);
    summary.set("loss_last_epoch", epoch_losses[epoch_losses.len() - 1]);
    summary.set("loss_drop", loss_drop(&epoch_losses, cfg.task.loss_floor()));
    summary.set(
        "max_inv_residual",
        log.max_residual().map_or("NA".to_string(), |v| format!("{v:e}")),
    );
    summary.set("seconds", format!("{:.1}", started.elapsed().as_secs_f64()));
    summary.write(&out.join("summary.txt"))?;
    Ok(RunOutcome {
        log,
        epoch_losses,
        summary,
    })
}
