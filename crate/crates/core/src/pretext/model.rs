use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{FiniteGroup, LabelAction};
use crate::nn::{
    group_linear, scale_channels, Backbone, BackboneConfig, BatchStats, Bound, EquivariantHead,
    Mode, ParamId, ParamStore,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How patch features are mapped to labels.
#[derive(Debug, Clone)]
pub enum HeadKind {
    /// Weight-tied head whose logits follow the given label action.
    Equivariant(LabelAction),
    /// Unconstrained linear map to `labels` classes.
    Plain { labels: usize },
}

#[derive(Debug, Clone)]
pub struct PatchClassifierConfig {
    pub backbone: BackboneConfig,
    /// Patches per sample (2 for context, 9 for jigsaw).
    pub patches: usize,
    /// Base width of the per-patch hidden layer.
    pub hidden: usize,
    pub head: HeadKind,
}

#[derive(Debug, Clone)]
enum Head {
    Equivariant(EquivariantHead),
    Plain { labels: usize },
}

/// Shared backbone on every patch, a per-patch equivariant hidden layer,
/// concatenation of the patch features along the channel axis, then the
/// classification head.
#[derive(Debug, Clone)]
pub struct PatchClassifier {
    backbone: Backbone,
    patches: usize,
    hidden: usize,
    hidden_w: ParamId,
    hidden_b: ParamId,
    head: Head,
    head_w: ParamId,
    head_b: ParamId,
}

impl PatchClassifier {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: PatchClassifierConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.patches == 0 {
            return Err(Error::Parameter("a sample needs at least one patch".into()));
        }
        let backbone = Backbone::new(cfg.backbone, store, "backbone", rng)?;
        let group = backbone.group().clone();
        let n = group.order();
        let c = backbone.out_channels();
        let hidden = scale_channels(cfg.hidden, n);
        let hidden_w = store.add(
            "head.hidden.w",
            Tensor::randn(vec![n, hidden, c], (2.0 / (n * c) as f64).sqrt(), rng),
        );
        let hidden_b = store.add("head.hidden.b", Tensor::zeros(vec![hidden]));
        let joint = cfg.patches * hidden;
        let (head, head_w, head_b) = match cfg.head {
            HeadKind::Equivariant(action) => {
                if action.group().kind() != group.kind() {
                    return Err(Error::Group(format!(
                        "label action of {:?} on a {:?} backbone",
                        action.group().kind(),
                        group.kind()
                    )));
                }
                let head = EquivariantHead::new(action)?;
                let o = head.n_orbits();
                let w = store.add(
                    "head.out.w",
                    Tensor::randn(vec![n, o, joint], (1.0 / (n * joint) as f64).sqrt(), rng),
                );
                let b = store.add("head.out.b", Tensor::zeros(vec![o]));
                (Head::Equivariant(head), w, b)
            }
            HeadKind::Plain { labels } => {
                let w = store.add(
                    "head.out.w",
                    Tensor::randn(vec![n * joint, labels], (1.0 / (n * joint) as f64).sqrt(), rng),
                );
                let b = store.add("head.out.b", Tensor::zeros(vec![labels]));
                (Head::Plain { labels }, w, b)
            }
        };
        Ok(Self {
            backbone,
            patches: cfg.patches,
            hidden,
            hidden_w,
            hidden_b,
            head,
            head_w,
            head_b,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn group(&self) -> &FiniteGroup {
        self.backbone.group()
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn label_count(&self) -> usize {
        match &self.head {
            Head::Equivariant(h) => h.label_count(),
            Head::Plain { labels } => *labels,
        }
    }

    /// Logits `[B, L]` for `x: [B * patches, C, p, p]`, patches of one sample
    /// contiguous and in slot order.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats: &mut BatchStats<T>,
    ) -> Result<Var> {
        let group = self.group();
        let n = group.order();
        let total = tape.shape(x)[0];
        if !total.is_multiple_of(self.patches) {
            return Err(Error::Structure(format!(
                "{total} patches for samples of {}",
                self.patches
            )));
        }
        let batch = total / self.patches;
        let f = self.backbone.forward(tape, bound, store, x, mode, stats)?;
        let h = group_linear(tape, f, bound.var(self.hidden_w), Some(bound.var(self.hidden_b)), group)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, vec![batch, self.patches, n, self.hidden])?;
        let h = tape.permute_axes(h, &[0, 2, 1, 3])?;
        let joint = tape.reshape(h, vec![batch, n, self.patches * self.hidden])?;
        let (w, b) = (bound.var(self.head_w), bound.var(self.head_b));
        match &self.head {
            Head::Equivariant(head) => head.forward(tape, joint, w, Some(b)),
            Head::Plain { .. } => {
                let flat = tape.reshape(joint, vec![batch, n * self.patches * self.hidden])?;
                let y = tape.matmul(flat, w)?;
                tape.add_channel(y, b, 1)
            }
        }
    }
}

/// Stacks per-sample patch tensors `[P, C, p, p]` into `[B * P, C, p, p]`.
pub fn stack_patches<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let stacked = Tensor::stack(samples)?;
    let s = stacked.shape().to_vec();
    let mut shape = vec![s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    stacked.reshape(shape)
}
