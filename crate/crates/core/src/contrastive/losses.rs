use crate::error::{Error, Result};
use crate::group::FiniteGroup;
use crate::nn::group_average;
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::state::FeatureQueue;

/// Default entropic regularization of the Sinkhorn-Knopp assignments.
pub const SINKHORN_EPS: f64 = 0.05;

const NORM_EPS: f64 = 1e-12;

/// Flattens `f: [B, G, C]` to unit vectors `[B, G*C]`, group-averaging
/// first when `invariant` is set.
pub fn embed<T: Scalar>(tape: &Tape<T>, f: Var, group: &FiniteGroup, invariant: bool) -> Result<Var> {
    let s = tape.shape(f);
    if s.len() != 3 {
        return Err(Error::Structure(format!("feature {s:?} is not [B,G,C]")));
    }
    let f = if invariant { group_average(tape, f, group)? } else { f };
    let flat = tape.reshape(f, vec![s[0], s[1] * s[2]])?;
    tape.l2_normalize(flat, 1, NORM_EPS)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// InfoNCE over embedded queries `q: [B, D]` and keys `k: [B, D]` (detached
/// here) against the queued negatives: the mean of
/// `-log(exp(q·k+/τ) / (exp(q·k+/τ) + Σ_Q exp(q·k/τ)))`.
pub fn moco_loss<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    queue: &FeatureQueue<T>,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let qs = tape.shape(q);
    if qs.len() != 2 || tape.shape(k) != qs {
        return Err(Error::Structure(format!(
            "queries {qs:?} and keys {:?}",
            tape.shape(k)
        )));
    }
    let k = tape.stop_gradient(k);
    let pos = tape.reshape(tape.dot_last(q, k)?, vec![qs[0], 1])?;
    let logits = match queue.keys() {
        Some(neg) => {
            if neg.shape()[1] != qs[1] {
                return Err(Error::Structure(format!(
                    "queue dimension {} for features of {}",
                    neg.shape()[1],
                    qs[1]
                )));
            }
            let neg_t = tape.constant(transpose(&neg));
            let neg = tape.matmul(q, neg_t)?;
            tape.concat(pos, neg, 1)?
        }
        None => pos,
    };
    let logits = tape.scale(logits, 1.0 / tau);
    tape.cross_entropy(logits, &vec![0; qs[0]])
}

fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| x.data()[(i % r) * c + i / r])
}

/// `-mean_b Σ_j targets[b, j] * log_softmax(logits)[b, j]`.
pub fn soft_cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || targets.shape() != s.as_slice() {
        return Err(Error::Structure(format!(
            "logits {s:?} against targets {:?}",
            targets.shape()
        )));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let prod = tape.mul(logp, tape.constant(targets.clone()))?;
    Ok(tape.scale(tape.sum(prod), -1.0 / s[0] as f64))
}

/// Equal-marginal assignments for `scores: [B, c]`.
///
/// Starts from `exp((s - max) / eps)` and alternates scaling the columns to
/// sum `1/c` and the rows to sum `1/B`; the result is rescaled so every row
/// is a distribution. When the kernel underflows the iteration is redone in
/// the log domain.
pub fn sinkhorn_knopp<T: Scalar>(scores: &Tensor<T>, n_iters: usize, eps: f64) -> Result<Tensor<T>> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(Error::Structure(format!("scores {s:?} are not [B, c]")));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("sinkhorn eps {eps} must be positive")));
    }
    if n_iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("sinkhorn scores".into()));
    }
    let (b, c) = (s[0], s[1]);
    let x: Vec<f64> = scores.data().iter().map(|v| v.as_f64() / eps).collect();
    let q = sinkhorn_linear(&x, b, c, n_iters).unwrap_or_else(|| sinkhorn_log(&x, b, c, n_iters));
    Tensor::new(vec![b, c], q.into_iter().map(T::of).collect())
}

fn sinkhorn_linear(x: &[f64], b: usize, c: usize, n_iters: usize) -> Option<Vec<f64>> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    for _ in 0..n_iters {
        for j in 0..c {
            let sum: f64 = (0..b).map(|i| q[i * c + j]).sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return None;
            }
            (0..b).for_each(|i| q[i * c + j] /= sum * c as f64);
        }
        for row in q.chunks_exact_mut(c) {
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return None;
            }
            row.iter_mut().for_each(|v| *v /= sum * b as f64);
        }
    }
    normalize_rows(&mut q, c);
    q.iter().all(|v| v.is_finite()).then_some(q)
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sinkhorn_log(x: &[f64], b: usize, c: usize, n_iters: usize) -> Vec<f64> {
    let (log_b, log_c) = ((b as f64).ln(), (c as f64).ln());
    let mut u = vec![0.0; b];
    let mut v = vec![0.0; c];
    for _ in 0..n_iters {
        for j in 0..c {
            let lse = logsumexp((0..b).map(|i| x[i * c + j] + u[i]));
            v[j] = -log_c - lse;
        }
        for i in 0..b {
            let lse = logsumexp((0..c).map(|j| x[i * c + j] + v[j]));
            u[i] = -log_b - lse;
        }
    }
    let mut q: Vec<f64> = (0..b * c).map(|k| (x[k] + u[k / c] + v[k % c]).exp()).collect();
    normalize_rows(&mut q, c);
    q
}

fn normalize_rows(q: &mut [f64], c: usize) {
    for row in q.chunks_exact_mut(c) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Swapped prediction over embedded views `z[v]: [B, D]` and prototypes
/// `[D, c]`. Assignments come from the first `n_large` views through
/// Sinkhorn-Knopp (detached) and are predicted from every other view with
/// a temperature-`tau` softmax; the loss averages over all such pairs.
pub fn swav_loss<T: Scalar>(
    tape: &Tape<T>,
    z: &[Var],
    prototypes: Var,
    n_large: usize,
    tau: f64,
    eps: f64,
    n_iters: usize,
) -> Result<Var> {
    check_tau(tau)?;
    if z.len() < 2 || n_large == 0 || n_large > z.len() {
        return Err(Error::Parameter(format!(
            "{} views with {n_large} assignment views",
            z.len()
        )));
    }
    let scores: Vec<Var> = z
        .iter()
        .map(|&zv| tape.matmul(zv, prototypes))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate().take(n_large) {
        let q = sinkhorn_knopp(&tape.value(si), n_iters, eps)?;
        for (v, &sv) in scores.iter().enumerate() {
            if v == i {
                continue;
            }
            let l = soft_cross_entropy(tape, tape.scale(sv, 1.0 / tau), &q)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
            pairs += 1;
        }
    }
    let total = total.expect("at least one pair");
    Ok(tape.scale(total, 1.0 / pairs as f64))
}

/// `-(cos(p1, sg z2) + cos(p2, sg z1)) / 2`, batch-averaged, on `[B, G, C]`
/// predictor outputs `p` and projections `z`.
pub fn simsiam_loss<T: Scalar>(
    tape: &Tape<T>,
    p: [Var; 2],
    z: [Var; 2],
    group: &FiniteGroup,
    invariant: bool,
) -> Result<Var> {
    let prep = |x: Var, detach: bool| -> Result<Var> {
        let x = if detach { tape.stop_gradient(x) } else { x };
        embed(tape, x, group, invariant)
    };
    let (p1, p2) = (prep(p[0], false)?, prep(p[1], false)?);
    let (z1, z2) = (prep(z[0], true)?, prep(z[1], true)?);
    let c1 = tape.mean(tape.dot_last(p1, z2)?);
    let c2 = tape.mean(tape.dot_last(p2, z1)?);
    Ok(tape.scale(tape.add(c1, c2)?, -0.5))
}
