use rand::Rng;

use super::layers::{group_conv, group_pool_spatial, lifting_conv, scale_channels};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::group::{FiniteGroup, GroupKind};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;

/// Running-statistics momentum used by the training loops.
pub const BN_MOMENTUM: f64 = 0.9;

/// Layer layout of a [`Backbone`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub group: GroupKind,
    pub in_channels: usize,
    /// Base widths before group scaling; entry 0 is the lifting layer, each
    /// further entry adds one group convolution.
    pub widths: Vec<usize>,
    /// Whether a 2x mean-pool follows each layer (same length as `widths`).
    pub pool_after: Vec<bool>,
    /// Mean-pool window applied to the raw input (1 disables it).
    pub stem_pool: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    /// Divide widths by `sqrt(|G|)` to keep parameter counts comparable.
    pub scale_widths: bool,
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Total downsampling factor of the spatial axes.
    pub fn stride(&self) -> usize {
        self.stem_pool.max(1) << self.pool_after.iter().filter(|&&p| p).count()
    }

    pub fn channels(&self) -> Vec<usize> {
        let order = self.group.order();
        self.widths
            .iter()
            .map(|&w| {
                if self.scale_widths {
                    scale_channels(w, order)
                } else {
                    w
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Parameter(format!("backbone widths {:?}", self.widths)));
        }
        if self.pool_after.len() != self.widths.len() {
            return Err(Error::Parameter(format!(
                "{} pooling flags for {} layers",
                self.pool_after.len(),
                self.widths.len()
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(self.kernel));
        }
        if self.in_channels == 0 || self.stem_pool == 0 {
            return Err(Error::Parameter("input channels and stem pool must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-norm behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch statistics recorded during a training-mode pass.
#[derive(Debug, Default)]
pub struct BatchStats<T> {
    entries: Vec<(ParamId, ParamId, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> BatchStats<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Folds the recorded statistics into the running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn commit(self, store: &mut ParamStore<T>, momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        let one_m = T::of(1.0 - momentum);
        for (mean_id, var_id, mean, var) in self.entries {
            for (id, batch) in [(mean_id, mean), (var_id, var)] {
                let cur = store.get(id);
                let next: Vec<T> = cur
                    .data()
                    .iter()
                    .zip(&batch)
                    .map(|(&r, &b)| m * r + one_m * b)
                    .collect();
                let shape = cur.shape().to_vec();
                store.set(id, Tensor::new(shape, next)?)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<Norm>,
    pool: bool,
}

/// `lifting_conv -> N x (group_conv) -> global pool`, each conv followed by
/// optional normalization, ReLU and optional 2x mean-pooling.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    group: FiniteGroup,
    channels: Vec<usize>,
    layers: Vec<Layer>,
}

impl Backbone {
    /// Registers the parameters under `prefix` in `store` with He-normal
    /// initialization.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: BackboneConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let group = FiniteGroup::new(cfg.group);
        let channels = cfg.channels();
        let n = group.order();
        let k = cfg.kernel;
        let mut layers = Vec::with_capacity(channels.len());
        for (i, &o) in channels.iter().enumerate() {
            let (shape, fan_in) = if i == 0 {
                (vec![o, cfg.in_channels, k, k], cfg.in_channels * k * k)
            } else {
                let c = channels[i - 1];
                (vec![n, o, c, k, k], n * c * k * k)
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = store.add(format!("{prefix}.conv{i}.w"), Tensor::randn(shape, std, rng));
            let (bias, norm) = if cfg.batch_norm {
                let norm = Norm {
                    gamma: store.add(format!("{prefix}.bn{i}.gamma"), Tensor::full(vec![o], T::one())),
                    beta: store.add(format!("{prefix}.bn{i}.beta"), Tensor::zeros(vec![o])),
                    mean: store.add_buffer(format!("{prefix}.bn{i}.running_mean"), Tensor::zeros(vec![o])),
                    var: store.add_buffer(format!("{prefix}.bn{i}.running_var"), Tensor::full(vec![o], T::one())),
                };
                (None, Some(norm))
            } else {
                (Some(store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(vec![o]))), None)
            };
            layers.push(Layer {
                weight,
                bias,
                norm,
                pool: cfg.pool_after[i],
            });
        }
        Ok(Self {
            cfg,
            group,
            channels,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    /// Channels per group block of the pooled output.
    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one layer")
    }

    /// Length of the flattened pooled feature, `|G| * out_channels`.
    pub fn feature_dim(&self) -> usize {
        self.group.order() * self.out_channels()
    }

    /// Number of trainable scalars owned by this backbone.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut ids = vec![l.weight];
                ids.extend(l.bias);
                if let Some(n) = &l.norm {
                    ids.extend([n.gamma, n.beta]);
                }
                ids
            })
            .map(|id| store.get(id).numel())
            .sum()
    }

    pub fn check_extent(&self, n: usize) -> Result<()> {
        let stride = self.cfg.stride();
        if n == 0 || !n.is_multiple_of(stride) {
            return Err(shape_err(
                "backbone",
                format!("input extent {n} is not divisible by the total pooling stride {stride}"),
            ));
        }
        Ok(())
    }

    /// Spatial group feature map `[B, G, C, H', W']` before global pooling.
    pub fn forward_map<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats: &mut BatchStats<T>,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[2] != xs[3] || xs[1] != self.cfg.in_channels {
            return Err(shape_err(
                "backbone",
                format!("input {xs:?}, expected [B, {}, n, n]", self.cfg.in_channels),
            ));
        }
        self.check_extent(xs[2])?;
        let pad = self.cfg.kernel / 2;
        let mut h = if self.cfg.stem_pool > 1 {
            tape.avg_pool2d(x, self.cfg.stem_pool)?
        } else {
            x
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bound.var(layer.weight);
            h = if i == 0 {
                lifting_conv(tape, h, w, &self.group, pad)?
            } else {
                group_conv(tape, h, w, &self.group, pad)?
            };
            if let Some(b) = layer.bias {
                h = tape.add_channel(h, bound.var(b), 2)?;
            }
            if let Some(norm) = &layer.norm {
                h = self.normalize(tape, bound, store, h, norm, mode, stats)?;
            }
            h = tape.relu(h);
            if layer.pool {
                h = tape.avg_pool2d(h, 2)?;
            }
        }
        Ok(h)
    }

    /// Pooled feature `[B, G, C]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats: &mut BatchStats<T>,
    ) -> Result<Var> {
        let map = self.forward_map(tape, bound, store, x, mode, stats)?;
        group_pool_spatial(tape, map)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        store: &ParamStore<T>,
        h: Var,
        norm: &Norm,
        mode: Mode,
        stats: &mut BatchStats<T>,
    ) -> Result<Var> {
        let (gamma, beta) = (bound.var(norm.gamma), bound.var(norm.beta));
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm(h, gamma, beta, 2, BN_EPS)?;
                stats.entries.push((norm.mean, norm.var, mean, var));
                Ok(y)
            }
            Mode::Eval => {
                let shape = tape.shape(h);
                let c = shape[2];
                let inner: usize = shape[3..].iter().product();
                let (g, b) = (tape.value(gamma), tape.value(beta));
                let (rm, rv) = (store.get(norm.mean), store.get(norm.var));
                let scale: Vec<T> = (0..c)
                    .map(|i| g.data()[i] / (rv.data()[i] + T::of(BN_EPS)).sqrt())
                    .collect();
                let shift: Vec<T> = (0..c).map(|i| b.data()[i] - rm.data()[i] * scale[i]).collect();
                let full = Tensor::from_fn(shape.clone(), |i| scale[(i / inner) % c]);
                let y = tape.mul(h, tape.constant(full))?;
                tape.add_channel(y, tape.constant(Tensor::new(vec![c], shift)?), 2)
            }
        }
    }
}
