use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, PooledFeature};
use crate::tensor::{Scalar, Tensor};

/// Bounded FIFO of unit-norm key vectors.
#[derive(Debug, Clone)]
pub struct FeatureQueue<T> {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<T>>,
}

impl<T: Scalar> FeatureQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends each row of `keys: [N, dim]` after normalizing it, evicting
    /// the oldest entries beyond capacity.
    pub fn push(&mut self, keys: &Tensor<T>) -> Result<()> {
        let s = keys.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Structure(format!(
                "keys {s:?} for a queue of dimension {}",
                self.dim
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for row in keys.data().chunks_exact(self.dim) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric(format!("key norm {norm}")));
            }
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(row.iter().map(|&x| x / norm).collect());
        }
        Ok(())
    }

    /// Fills the queue with random unit vectors.
    pub fn fill_random<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let n = self.capacity - self.len();
        if n > 0 {
            self.push(&Tensor::randn(vec![n, self.dim], 1.0, rng))?;
        }
        Ok(())
    }

    /// Stored keys `[len, dim]`, oldest first; `None` when empty.
    pub fn keys(&self) -> Option<Tensor<T>> {
        if self.rows.is_empty() {
            return None;
        }
        let data = self.rows.iter().flatten().copied().collect();
        Some(Tensor::new(vec![self.rows.len(), self.dim], data).expect("rows have queue dimension"))
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

/// Exponential moving average of a parameter store.
#[derive(Debug, Clone)]
pub struct MomentumEncoder<T> {
    shadow: ParamStore<T>,
    momentum: f64,
}

impl<T: Scalar> MomentumEncoder<T> {
    pub fn new(online: &ParamStore<T>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            shadow: online.clone(),
            momentum,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `θk = m θk + (1 - m) θ` for trainable entries; buffers are copied.
    pub fn update(&mut self, online: &ParamStore<T>) -> Result<()> {
        if online.len() != self.shadow.len() {
            return Err(Error::Structure("online and momentum stores differ in layout".into()));
        }
        let m = T::of(self.momentum);
        let one_m = T::of(1.0 - self.momentum);
        let ids: Vec<_> = online.ids().collect();
        for id in ids {
            let theta = online.get(id);
            let next = if online.is_trainable(id) {
                self.shadow.get(id).zip_map(theta, |k, t| m * k + one_m * t)?
            } else {
                theta.clone()
            };
            self.shadow.set(id, next)?;
        }
        Ok(())
    }
}

/// Prototype matrix `C: [d, c]` held in a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct Prototypes {
    id: ParamId,
}

impl Prototypes {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, count: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(Error::Parameter(format!("prototypes {dim} x {count}")));
        }
        let id = store.add("prototypes", Tensor::randn(vec![dim, count], 1.0, rng));
        let p = Self { id };
        p.renormalize(store)?;
        Ok(p)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Rescales every column to unit norm.
    pub fn renormalize<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = store.get(self.id);
        let (d, k) = (c.shape()[0], c.shape()[1]);
        let mut data = c.to_vec();
        for j in 0..k {
            let norm = (0..d).map(|i| data[i * k + j] * data[i * k + j]).sum::<T>().sqrt();
            let norm = norm.max(T::of(1e-12));
            (0..d).for_each(|i| data[i * k + j] /= norm);
        }
        store.set(self.id, Tensor::new(vec![d, k], data)?)
    }
}

/// Per-sample `(1/|G|²) Σ_{g1,g2} <T(g1) u, T(g2) v>`, evaluated as the inner
/// product of the group averages.
pub fn invariant_inner<T: Scalar>(u: &PooledFeature<T>, v: &PooledFeature<T>) -> Result<Vec<T>> {
    if u.tensor().shape() != v.tensor().shape() || u.group().order() != v.group().order() {
        return Err(Error::Structure(format!(
            "{:?} vs {:?}",
            u.tensor().shape(),
            v.tensor().shape()
        )));
    }
    let (au, av) = (u.group_average(), v.group_average());
    let s = u.tensor().shape();
    let width = s[1] * s[2];
    Ok(au
        .tensor()
        .data()
        .chunks_exact(width)
        .zip(av.tensor().data().chunks_exact(width))
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x * y).sum())
        .collect())
}
