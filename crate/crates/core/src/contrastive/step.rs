use crate::error::{Error, Result};
use crate::nn::{BatchStats, Bound, Mode, ParamStore, Sgd, BN_MOMENTUM};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::losses::{embed, moco_loss, simsiam_loss, swav_loss, SINKHORN_EPS};
use super::net::ContrastiveNet;
use super::state::{FeatureQueue, MomentumEncoder, Prototypes};

#[derive(Debug, Clone, PartialEq)]
pub struct MocoConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub invariant: bool,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            momentum: 0.999,
            queue_size: 4096,
            invariant: true,
        }
    }
}

/// Online parameters, momentum encoder, negatives queue and optimizer.
#[derive(Debug, Clone)]
pub struct MocoState<T> {
    pub params: ParamStore<T>,
    pub key: MomentumEncoder<T>,
    pub queue: FeatureQueue<T>,
    pub opt: Sgd<T>,
}

impl<T: Scalar> MocoState<T> {
    pub fn new(net: &ContrastiveNet, params: ParamStore<T>, opt: Sgd<T>, cfg: &MocoConfig) -> Result<Self> {
        let key = MomentumEncoder::new(&params, cfg.momentum)?;
        Ok(Self {
            params,
            key,
            queue: FeatureQueue::new(cfg.queue_size, net.embed_dim()),
            opt,
        })
    }
}

/// Loss for queries from `xq` (online) against keys from `xk` (momentum
/// encoder), plus the embedded keys for the queue.
#[allow(clippy::too_many_arguments)]
pub fn moco_forward<T: Scalar>(
    net: &ContrastiveNet,
    tape: &Tape<T>,
    bound: &Bound,
    params: &ParamStore<T>,
    key_params: &ParamStore<T>,
    queue: &FeatureQueue<T>,
    xq: &Tensor<T>,
    xk: &Tensor<T>,
    cfg: &MocoConfig,
    stats: &mut BatchStats<T>,
) -> Result<(Var, Tensor<T>)> {
    let group = net.group();
    let q = net.forward(tape, bound, params, tape.constant(xq.clone()), Mode::Train, stats)?;
    let q = embed(tape, q, group, cfg.invariant)?;
    let key_bound = key_params.bind(tape, true);
    let k = net.forward(
        tape,
        &key_bound,
        key_params,
        tape.constant(xk.clone()),
        Mode::Train,
        &mut BatchStats::new(),
    )?;
    let k = embed(tape, k, group, cfg.invariant)?;
    let loss = moco_loss(tape, q, k, queue, cfg.tau)?;
    Ok((loss, tape.value(k)))
}

/// One training iteration: loss, online update, momentum update, enqueue.
pub fn moco_step<T: Scalar>(
    net: &ContrastiveNet,
    state: &mut MocoState<T>,
    xq: &Tensor<T>,
    xk: &Tensor<T>,
    cfg: &MocoConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = state.params.bind(&tape, false);
    let mut stats = BatchStats::new();
    let (loss, keys) = moco_forward(
        net,
        &tape,
        &bound,
        &state.params,
        state.key.params(),
        &state.queue,
        xq,
        xk,
        cfg,
        &mut stats,
    )?;
    let value = finite_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    state.opt.step(&mut state.params, &bound, &grads)?;
    stats.commit(&mut state.params, BN_MOMENTUM)?;
    state.key.update(&state.params)?;
    state.queue.push(&keys)?;
    Ok(value)
}

fn finite_loss<T: Scalar>(tape: &Tape<T>, loss: Var) -> Result<f64> {
    let v = tape.value(loss).item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwavConfig {
    pub tau: f64,
    pub eps: f64,
    pub sinkhorn_iters: usize,
    /// Leading views used for assignments (the large crops).
    pub n_large: usize,
    pub prototypes: usize,
    pub invariant: bool,
}

impl Default for SwavConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            eps: SINKHORN_EPS,
            sinkhorn_iters: 3,
            n_large: 2,
            prototypes: 32,
            invariant: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwavState<T> {
    pub params: ParamStore<T>,
    pub prototypes: Prototypes,
    pub opt: Sgd<T>,
}

/// Multi-crop swapped-prediction loss; views may differ in extent.
#[allow(clippy::too_many_arguments)]
pub fn swav_forward<T: Scalar>(
    net: &ContrastiveNet,
    tape: &Tape<T>,
    bound: &Bound,
    params: &ParamStore<T>,
    prototypes: Prototypes,
    views: &[Tensor<T>],
    cfg: &SwavConfig,
    stats: &mut BatchStats<T>,
) -> Result<Var> {
    let z: Vec<Var> = views
        .iter()
        .map(|v| {
            let f = net.forward(tape, bound, params, tape.constant(v.clone()), Mode::Train, stats)?;
            embed(tape, f, net.group(), cfg.invariant)
        })
        .collect::<Result<_>>()?;
    swav_loss(
        tape,
        &z,
        bound.var(prototypes.id()),
        cfg.n_large,
        cfg.tau,
        cfg.eps,
        cfg.sinkhorn_iters,
    )
}

pub fn swav_step<T: Scalar>(
    net: &ContrastiveNet,
    state: &mut SwavState<T>,
    views: &[Tensor<T>],
    cfg: &SwavConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = state.params.bind(&tape, false);
    let mut stats = BatchStats::new();
    let loss = swav_forward(net, &tape, &bound, &state.params, state.prototypes, views, cfg, &mut stats)?;
    let value = finite_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    state.opt.step(&mut state.params, &bound, &grads)?;
    stats.commit(&mut state.params, BN_MOMENTUM)?;
    state.prototypes.renormalize(&mut state.params)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimSiamConfig {
    pub invariant: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn simsiam_forward<T: Scalar>(
    net: &ContrastiveNet,
    tape: &Tape<T>,
    bound: &Bound,
    params: &ParamStore<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &SimSiamConfig,
    stats: &mut BatchStats<T>,
) -> Result<Var> {
    let z1 = net.forward(tape, bound, params, tape.constant(x1.clone()), Mode::Train, stats)?;
    let z2 = net.forward(tape, bound, params, tape.constant(x2.clone()), Mode::Train, stats)?;
    let p1 = net.predict(tape, bound, z1)?;
    let p2 = net.predict(tape, bound, z2)?;
    simsiam_loss(tape, [p1, p2], [z1, z2], net.group(), cfg.invariant)
}

pub fn simsiam_step<T: Scalar>(
    net: &ContrastiveNet,
    params: &mut ParamStore<T>,
    opt: &mut Sgd<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &SimSiamConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let mut stats = BatchStats::new();
    let loss = simsiam_forward(net, &tape, &bound, params, x1, x2, cfg, &mut stats)?;
    let value = finite_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    opt.step(params, &bound, &grads)?;
    stats.commit(params, BN_MOMENTUM)?;
    Ok(value)
}
