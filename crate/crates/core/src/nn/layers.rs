use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::group::{FiniteGroup, GridAction, LabelAction};
use crate::tensor::{Scalar, Tape, Var};

fn check_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::UnsupportedKernel(k));
    }
    Ok(())
}

fn check_group_axis(op: &'static str, shape: &[usize], axis: usize, group: &FiniteGroup) -> Result<()> {
    match shape.get(axis) {
        Some(&g) if g == group.order() => Ok(()),
        Some(&g) => Err(Error::Group(format!(
            "{op}: group axis has extent {g}, group {} has order {}",
            group.kind().map_or("custom", |k| k.name()),
            group.order()
        ))),
        None => Err(shape_err(op, format!("missing group axis in {shape:?}"))),
    }
}

/// Gather index that builds the full filter bank `[G*O, C, k, k]` of a
/// lifting layer from `w0: [O, C, k, k]`; row `g*O + o` holds `g` applied to
/// filter `o`.
pub fn lifting_filter_index(group: &FiniteGroup, o: usize, c: usize, k: usize) -> Result<Vec<usize>> {
    check_kernel(k)?;
    let action = GridAction::new(group, k)?;
    let kk = k * k;
    let mut index = Vec::with_capacity(group.order() * o * c * kk);
    for g in group.elements() {
        let src = action.source_map(g);
        for oi in 0..o {
            for ci in 0..c {
                index.extend(src.iter().map(|&p| (oi * c + ci) * kk + p));
            }
        }
    }
    Ok(index)
}

/// Gather index that builds the full filter bank `[G*O, G*C, k, k]` of a
/// group convolution from `w: [G, O, C, k, k]`: block `(g, h)` holds
/// `g` applied to `w[g⁻¹∘h]`.
pub fn group_filter_index(group: &FiniteGroup, o: usize, c: usize, k: usize) -> Result<Vec<usize>> {
    check_kernel(k)?;
    let action = GridAction::new(group, k)?;
    let n = group.order();
    let kk = k * k;
    let mut index = Vec::with_capacity(n * o * n * c * kk);
    for g in group.elements() {
        let src = action.source_map(g);
        let gi = group.inverse(g);
        for oi in 0..o {
            for h in group.elements() {
                let s = group.compose(gi, h);
                for ci in 0..c {
                    let base = ((s * o + oi) * c + ci) * kk;
                    index.extend(src.iter().map(|&p| base + p));
                }
            }
        }
    }
    Ok(index)
}

/// Lifting convolution of `x: [B, C, H, W]` with `w0: [O, C, k, k]`,
/// producing `[B, G, O, H', W']` where plane `g` is `x` convolved with the
/// `g`-transformed filters.
pub fn lifting_conv<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w0: Var,
    group: &FiniteGroup,
    pad: usize,
) -> Result<Var> {
    let ws = tape.shape(w0);
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(shape_err("lifting_conv", format!("filters {ws:?}")));
    }
    let (o, c, k) = (ws[0], ws[1], ws[2]);
    let n = group.order();
    let index = lifting_filter_index(group, o, c, k)?;
    let bank = tape.gather(w0, Arc::new(index), vec![n * o, c, k, k])?;
    let y = tape.conv2d(x, bank, 1, pad)?;
    let ys = tape.shape(y);
    tape.reshape(y, vec![ys[0], n, o, ys[2], ys[3]])
}

/// Group convolution of `x: [B, G, C, H, W]` with `w: [G, O, C, k, k]`.
/// Output plane `g` is `Σ_h conv(x_h, g·w[g⁻¹∘h])`.
pub fn group_conv<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    group: &FiniteGroup,
    pad: usize,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    if xs.len() != 5 {
        return Err(shape_err("group_conv", format!("input {xs:?} is not [B,G,C,H,W]")));
    }
    check_group_axis("group_conv", &xs, 1, group)?;
    check_group_axis("group_conv", &ws, 0, group)?;
    if ws.len() != 5 || ws[3] != ws[4] || ws[2] != xs[2] {
        return Err(shape_err(
            "group_conv",
            format!("filters {ws:?} for input {xs:?}"),
        ));
    }
    let (n, o, c, k) = (group.order(), ws[1], ws[2], ws[3]);
    let index = group_filter_index(group, o, c, k)?;
    let bank = tape.gather(w, Arc::new(index), vec![n * o, n * c, k, k])?;
    let flat = tape.reshape(x, vec![xs[0], n * c, xs[3], xs[4]])?;
    let y = tape.conv2d(flat, bank, 1, pad)?;
    let ys = tape.shape(y);
    tape.reshape(y, vec![ys[0], n, o, ys[2], ys[3]])
}

/// Global spatial mean: `[B, G, C, H, W] -> [B, G, C]`.
pub fn group_pool_spatial<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 5 {
        return Err(shape_err("group_pool_spatial", format!("input {s:?}")));
    }
    tape.spatial_mean(x)
}

/// `(1/|G|) Σ_g T_out(g) v` for `v: [B, G, C]`: every block becomes the block
/// mean, summed in a canonical order.
pub fn group_average<T: Scalar>(tape: &Tape<T>, v: Var, group: &FiniteGroup) -> Result<Var> {
    let s = tape.shape(v);
    if s.len() != 3 {
        return Err(Error::Structure(format!("pooled feature {s:?} is not [B,G,C]")));
    }
    check_group_axis("group_average", &s, 1, group).map_err(|e| Error::Structure(e.to_string()))?;
    tape.group_mean(v, 1)
}

/// Regular action on the group axis: `out[g∘h] = v[h]` along `axis`.
pub fn regular_permutation(group: &FiniteGroup, g: usize) -> Vec<usize> {
    let gi = group.inverse(g);
    group.elements().map(|j| group.compose(gi, j)).collect()
}

/// Gather index that expands `w: [G, O, C]` into the `[G*C, G*O]` matrix of
/// an equivariant linear map on regular-representation blocks.
pub fn group_linear_index(group: &FiniteGroup, o: usize, c: usize) -> Vec<usize> {
    let n = group.order();
    let mut index = vec![0; n * c * n * o];
    for h in group.elements() {
        for ci in 0..c {
            for g in group.elements() {
                let s = group.compose(group.inverse(g), h);
                for oi in 0..o {
                    index[(h * c + ci) * n * o + g * o + oi] = (s * o + oi) * c + ci;
                }
            }
        }
    }
    index
}

/// Equivariant linear map `[B, G, C] -> [B, G, O]`:
/// `out_g = Σ_h w[g⁻¹∘h] v_h + b`, with `w: [G, O, C]` and an optional bias
/// `b: [O]` shared across the group axis.
pub fn group_linear<T: Scalar>(
    tape: &Tape<T>,
    v: Var,
    w: Var,
    bias: Option<Var>,
    group: &FiniteGroup,
) -> Result<Var> {
    let vs = tape.shape(v);
    let ws = tape.shape(w);
    if vs.len() != 3 || ws.len() != 3 || ws[2] != vs[2] {
        return Err(Error::Structure(format!("weights {ws:?} for feature {vs:?}")));
    }
    check_group_axis("group_linear", &vs, 1, group)?;
    check_group_axis("group_linear", &ws, 0, group)?;
    let (n, o, c) = (group.order(), ws[1], ws[2]);
    let full = tape.gather(w, Arc::new(group_linear_index(group, o, c)), vec![n * c, n * o])?;
    let flat = tape.reshape(v, vec![vs[0], n * c])?;
    let y = tape.matmul(flat, full)?;
    let y = tape.reshape(y, vec![vs[0], n, o])?;
    match bias {
        Some(b) => tape.add_channel(y, b, 2),
        None => Ok(y),
    }
}

/// Maps `[B, G, n_orbits]` equivariant scores onto a label space whose
/// group action decomposes into free orbits.
#[derive(Debug, Clone)]
pub struct EquivariantHead {
    action: LabelAction,
    n_orbits: usize,
    order: Arc<Vec<usize>>,
}

impl EquivariantHead {
    pub fn new(action: LabelAction) -> Result<Self> {
        let coords = action.free_orbit_coordinates()?;
        let n_orbits = coords.iter().map(|&(o, _)| o + 1).max().unwrap_or(0);
        let order = coords.iter().map(|&(o, g)| g * n_orbits + o).collect();
        Ok(Self {
            action,
            n_orbits,
            order: Arc::new(order),
        })
    }

    pub fn n_orbits(&self) -> usize {
        self.n_orbits
    }

    pub fn label_count(&self) -> usize {
        self.action.label_count()
    }

    pub fn action(&self) -> &LabelAction {
        &self.action
    }

    /// Logits `[B, L]` from `v: [B, G, C]` with `w: [G, n_orbits, C]` and
    /// bias `b: [n_orbits]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, v: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let group = self.action.group();
        let ws = tape.shape(w);
        if ws.get(1) != Some(&self.n_orbits) {
            return Err(Error::Structure(format!(
                "head weights {ws:?} for {} orbits",
                self.n_orbits
            )));
        }
        let scores = group_linear(tape, v, w, b, group)?;
        let batch = tape.shape(scores)[0];
        let l = self.label_count();
        let mut index = Vec::with_capacity(batch * l);
        for bi in 0..batch {
            let base = bi * group.order() * self.n_orbits;
            index.extend(self.order.iter().map(|&i| base + i));
        }
        tape.gather(scores, Arc::new(index), vec![batch, l])
    }
}

/// Filter count for a group of the given order so that parameter counts stay
/// close to a plain network of `base_channels`: `round(base / sqrt(order))`,
/// halves rounded up, at least 1.
pub fn scale_channels(base_channels: usize, group_order: usize) -> usize {
    assert!(group_order >= 1, "group order must be positive");
    let x = base_channels as f64 / (group_order as f64).sqrt();
    ((x + 0.5).floor() as usize).max(1)
}
