use rand::Rng;

use crate::error::Result;
use crate::group::FiniteGroup;
use crate::nn::{
    group_linear, scale_channels, Backbone, BackboneConfig, BatchStats, Bound, Mode, ParamId,
    ParamStore,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ContrastiveNetConfig {
    pub backbone: BackboneConfig,
    /// Base widths of the two-layer projection head.
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Base hidden width of the predictor; `None` builds no predictor.
    pub predictor_hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &FiniteGroup,
        out: usize,
        inp: usize,
        rng: &mut R,
    ) -> Self {
        let n = group.order();
        let std = (2.0 / (n * inp) as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(vec![n, out, inp], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![out])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Var, group: &FiniteGroup) -> Result<Var> {
        group_linear(tape, x, bound.var(self.w), Some(bound.var(self.b)), group)
    }
}

/// Backbone plus a two-layer equivariant projection head, and optionally a
/// two-layer equivariant predictor. All outputs keep the `[B, G, C]` layout.
#[derive(Debug, Clone)]
pub struct ContrastiveNet {
    backbone: Backbone,
    proj: [Dense; 2],
    predictor: Option<[Dense; 2]>,
    out: usize,
}

impl ContrastiveNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: ContrastiveNetConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(cfg.backbone, store, "backbone", rng)?;
        let group = backbone.group().clone();
        let n = group.order();
        let c = backbone.out_channels();
        let hidden = scale_channels(cfg.proj_hidden, n);
        let out = scale_channels(cfg.proj_out, n);
        let proj = [
            Dense::new(store, "proj0", &group, hidden, c, rng),
            Dense::new(store, "proj1", &group, out, hidden, rng),
        ];
        let predictor = cfg.predictor_hidden.map(|h| {
            let h = scale_channels(h, n);
            [
                Dense::new(store, "pred0", &group, h, out, rng),
                Dense::new(store, "pred1", &group, out, h, rng),
            ]
        });
        Ok(Self {
            backbone,
            proj,
            predictor,
            out,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn group(&self) -> &FiniteGroup {
        self.backbone.group()
    }

    /// Channels per block of the projection output.
    pub fn out_channels(&self) -> usize {
        self.out
    }

    /// Flattened projection dimension `|G| * out_channels`.
    pub fn embed_dim(&self) -> usize {
        self.group().order() * self.out
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    /// Projection `[B, G, D]` of `x: [B, C, n, n]`.
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
        let f = self.backbone.forward(tape, bound, store, x, mode, stats)?;
        let h = tape.relu(self.proj[0].apply(tape, bound, f, group)?);
        self.proj[1].apply(tape, bound, h, group)
    }

    /// Predictor output for a projection `z: [B, G, D]`; identity when the
    /// net was built without a predictor.
    pub fn predict<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
        let Some(pred) = &self.predictor else {
            return Ok(z);
        };
        let group = self.group();
        let h = tape.relu(pred[0].apply(tape, bound, z, group)?);
        pred[1].apply(tape, bound, h, group)
    }
}
