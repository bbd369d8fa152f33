use std::f64::consts::PI;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tensor};

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at every listed step.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Half-cosine decay from the base rate to zero over `total` steps.
    Cosine { total: usize },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Step { milestones, gamma } => {
                gamma.powi(milestones.iter().filter(|&&m| step >= m).count() as i32)
            }
            Schedule::Cosine { total } => {
                let t = (step as f64 / (*total).max(1) as f64).min(1.0);
                0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    velocity: Vec<Option<Vec<T>>>,
    steps: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "sgd: lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            schedule,
            velocity: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.schedule.factor(self.steps)
    }

    /// Applies one update to every trainable entry that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        self.step_ids(store, bound, grads, &ids)
    }

    pub fn step_ids(
        &mut self,
        store: &mut ParamStore<T>,
        bound: &Bound,
        grads: &Gradients<T>,
        ids: &[ParamId],
    ) -> Result<()> {
        let lr = T::of(self.current_lr());
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in ids {
            let Some(g) = grads.get(bound.var(id)) else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of {}", store.name(id))));
            }
            let p = store.get(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); p.numel()]);
            let mut next = p.to_vec();
            for ((vi, pi), &gi) in v.iter_mut().zip(next.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
            let shape = p.shape().to_vec();
            store.set(id, Tensor::new(shape, next)?)?;
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::Cosine { total: 10 };
        assert_eq!(s.factor(0), 1.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-12);
        assert!(s.factor(10).abs() < 1e-12);
        let st = Schedule::Step {
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert_eq!(st.factor(1), 1.0);
        assert!((st.factor(4) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.9, 0.0, Schedule::Constant).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let b = store.bind(&tape, false);
            let w = b.var(id);
            let loss = tape.sum(tape.mul(w, w).unwrap());
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &b, &g).unwrap();
        }
        // step 1: v=2, w=0.8; step 2: v=0.9*2+1.6=3.4, w=0.8-0.34
        assert!((store.get(id).item() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f32>::new(0.0, 0.9, 0.0, Schedule::Constant).is_err());
        assert!(Sgd::<f32>::new(0.1, 1.0, 0.0, Schedule::Constant).is_err());
    }
}
