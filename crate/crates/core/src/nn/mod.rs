//! Group-equivariant layers, heads and small backbones.
//!
//! Feature maps carry a group axis: `[B, G, C, H, W]` for spatial maps and
//! `[B, G, C]` after pooling. The output action `T_out(g)` moves block `h`
//! to `g∘h` and, for spatial maps, also relocates the pixels by `g`.

mod backbone;
mod layers;
mod optim;
mod params;

pub use backbone::{Backbone, BackboneConfig, BatchStats, Mode, BN_MOMENTUM};
pub use layers::{
    group_average, group_conv, group_filter_index, group_linear, group_linear_index,
    group_pool_spatial, lifting_conv, lifting_filter_index, regular_permutation, scale_channels,
    EquivariantHead,
};
pub use optim::{Schedule, Sgd};
pub use params::{Bound, Checkpoint, ParamId, ParamStore};

use crate::error::{shape_err, Error, Result};
use crate::group::{apply_grid, FiniteGroup, GridAction};
use crate::tensor::{Scalar, Tape, Tensor};

/// A `[B, G, C, H, W]` tensor tied to its group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFeatureMap<T> {
    tensor: Tensor<T>,
    group: FiniteGroup,
}

impl<T: Scalar> GroupFeatureMap<T> {
    pub fn new(tensor: Tensor<T>, group: &FiniteGroup) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 || s[3] != s[4] {
            return Err(shape_err("group_feature_map", format!("shape {s:?}")));
        }
        if s[1] != group.order() {
            return Err(Error::Group(format!(
                "group axis {} for a group of order {}",
                s[1],
                group.order()
            )));
        }
        Ok(Self {
            tensor,
            group: group.clone(),
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    /// `T_out(g)`: plane `h` is spatially transformed by `g` and stored at `g∘h`.
    pub fn transform(&self, action: &GridAction, g: usize) -> Result<Self> {
        let moved = apply_grid(action, g, &self.tensor)?;
        let s = self.tensor.shape();
        let perm = regular_permutation(&self.group, g);
        let tensor = permute_axis1(&moved, &perm, s[0], s[1], s[2..].iter().product());
        Ok(Self {
            tensor,
            group: self.group.clone(),
        })
    }
}

/// A `[B, G, C]` tensor of pooled regular-representation blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T> {
    tensor: Tensor<T>,
    group: FiniteGroup,
}

impl<T: Scalar> PooledFeature<T> {
    pub fn new(tensor: Tensor<T>, group: &FiniteGroup) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[1] != group.order() {
            return Err(Error::Structure(format!(
                "pooled feature {s:?} for a group of order {}",
                group.order()
            )));
        }
        Ok(Self {
            tensor,
            group: group.clone(),
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn block_size(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Block permutation `h ↦ g∘h`.
    pub fn transform(&self, g: usize) -> Self {
        let s = self.tensor.shape();
        let perm = regular_permutation(&self.group, g);
        Self {
            tensor: permute_axis1(&self.tensor, &perm, s[0], s[1], s[2]),
            group: self.group.clone(),
        }
    }

    /// Per-sample L2 norm, summing squares in ascending order so the value is
    /// bit-identical for any block permutation.
    pub fn norms(&self) -> Vec<T> {
        let s = self.tensor.shape();
        self.tensor
            .data()
            .chunks_exact(s[1] * s[2])
            .map(|row| {
                let mut sq: Vec<T> = row.iter().map(|&x| x * x).collect();
                sq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                sq.into_iter().fold(T::zero(), |a, e| a + e).sqrt()
            })
            .collect()
    }

    /// `(1/|G|) Σ_g T_out(g) v`, every block replaced by the block mean.
    pub fn group_average(&self) -> Self {
        let tape = Tape::new();
        let v = tape.constant(self.tensor.clone());
        let avg = tape.group_mean(v, 1).expect("axis 1 exists");
        Self {
            tensor: tape.value(avg),
            group: self.group.clone(),
        }
    }
}

fn permute_axis1<T: Scalar>(x: &Tensor<T>, perm: &[usize], outer: usize, n: usize, inner: usize) -> Tensor<T> {
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for o in 0..outer {
        for &p in perm {
            let start = (o * n + p) * inner;
            out.extend_from_slice(&d[start..start + inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}
