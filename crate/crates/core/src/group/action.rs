use std::sync::Arc;

use super::FiniteGroup;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Exact coordinate bijections of an `n x n` grid, one per group element.
#[derive(Debug, Clone)]
pub struct GridAction {
    group: FiniteGroup,
    n: usize,
    /// `forward[g][p]` is the flat position that pixel `p` moves to.
    forward: Vec<Vec<usize>>,
    /// `source[g][q]` is the flat position whose pixel lands on `q`.
    source: Vec<Arc<Vec<usize>>>,
}

impl GridAction {
    pub fn new(group: &FiniteGroup, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Extent("grid extent must be positive".into()));
        }
        let forward: Vec<Vec<usize>> = group
            .elements()
            .map(|g| {
                let t = group.transform(g);
                (0..n * n)
                    .map(|p| {
                        let (r, c) = t.map_point(n, p / n, p % n);
                        r * n + c
                    })
                    .collect()
            })
            .collect();
        let source = forward
            .iter()
            .map(|fwd| {
                let mut src = vec![0; n * n];
                for (p, &q) in fwd.iter().enumerate() {
                    src[q] = p;
                }
                Arc::new(src)
            })
            .collect();
        Ok(Self {
            group: group.clone(),
            n,
            forward,
            source,
        })
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn extent(&self) -> usize {
        self.n
    }

    /// Where `(row, col)` goes under element `g`.
    pub fn map(&self, g: usize, row: usize, col: usize) -> (usize, usize) {
        let q = self.forward[g][row * self.n + col];
        (q / self.n, q % self.n)
    }

    pub fn forward_map(&self, g: usize) -> &[usize] {
        &self.forward[g]
    }

    /// Inverse lookup table for element `g` (used as a gather index).
    pub fn source_map(&self, g: usize) -> &Arc<Vec<usize>> {
        &self.source[g]
    }
}

/// Relocates the pixels of the trailing `n x n` axes by element `g`.
/// Values are moved, never interpolated, so the result is bit-exact.
pub fn apply_grid<T: Scalar>(action: &GridAction, g: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let n = action.extent();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(shape_err(
            "apply_grid",
            format!("trailing axes must be square, got {s:?}"),
        ));
    }
    if s[s.len() - 1] != n {
        return Err(shape_err(
            "apply_grid",
            format!("trailing extent {} but action built for {n}", s[s.len() - 1]),
        ));
    }
    if g >= action.group().order() {
        return Err(Error::Group(format!("element {g} out of range")));
    }
    let src = action.source_map(g);
    let plane = n * n;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for chunk in d.chunks_exact(plane) {
        out.extend(src.iter().map(|&p| chunk[p]));
    }
    Tensor::new(s.to_vec(), out)
}

/// A homomorphism from the group into permutations of `0..L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAction {
    group: FiniteGroup,
    perms: Vec<Vec<usize>>,
}

impl LabelAction {
    /// Validates bijectivity, the identity law and the homomorphism law.
    pub fn new(group: &FiniteGroup, perms: Vec<Vec<usize>>) -> Result<Self> {
        if perms.len() != group.order() {
            return Err(Error::Group(format!(
                "{} permutations for a group of order {}",
                perms.len(),
                group.order()
            )));
        }
        let l = perms.first().map_or(0, Vec::len);
        for p in &perms {
            crate::tensor::check_permutation(p, l)?;
        }
        if perms[group.identity()].iter().enumerate().any(|(i, &j)| i != j) {
            return Err(Error::Group("identity does not act trivially".into()));
        }
        for a in group.elements() {
            for b in group.elements() {
                let ab = group.compose(a, b);
                if (0..l).any(|i| perms[ab][i] != perms[a][perms[b][i]]) {
                    return Err(Error::Group(format!(
                        "label action is not a homomorphism at ({}, {})",
                        group.name(a),
                        group.name(b)
                    )));
                }
            }
        }
        Ok(Self {
            group: group.clone(),
            perms,
        })
    }

    /// `copies` stacked regular representations: label `o * |G| + h` is sent
    /// by `g` to `o * |G| + g∘h`.
    pub fn regular_copies(group: &FiniteGroup, copies: usize) -> Self {
        let n = group.order();
        let perms = group
            .elements()
            .map(|g| {
                (0..copies * n)
                    .map(|l| (l / n) * n + group.compose(g, l % n))
                    .collect()
            })
            .collect();
        Self {
            group: group.clone(),
            perms,
        }
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn label_count(&self) -> usize {
        self.perms.first().map_or(0, Vec::len)
    }

    pub fn apply(&self, g: usize, label: usize) -> usize {
        self.perms[g][label]
    }

    pub fn permutation(&self, g: usize) -> &[usize] {
        &self.perms[g]
    }

    /// Orbits, each listed in ascending label order.
    pub fn orbits(&self) -> Vec<Vec<usize>> {
        let l = self.label_count();
        let mut seen = vec![false; l];
        let mut out = Vec::new();
        for start in 0..l {
            if seen[start] {
                continue;
            }
            let mut orbit: Vec<usize> = self.group.elements().map(|g| self.apply(g, start)).collect();
            orbit.sort_unstable();
            orbit.dedup();
            orbit.iter().for_each(|&i| seen[i] = true);
            out.push(orbit);
        }
        out
    }

    /// Decomposes the labels into free orbits. Returns, per label, the pair
    /// `(orbit index, g)` with `label = g · representative(orbit)`, where the
    /// representative is the smallest label of the orbit.
    pub fn free_orbit_coordinates(&self) -> Result<Vec<(usize, usize)>> {
        let l = self.label_count();
        let mut coords = vec![None; l];
        for (o, orbit) in self.orbits().into_iter().enumerate() {
            if orbit.len() != self.group.order() {
                return Err(Error::Representation(format!(
                    "orbit of label {} has {} elements, |G| = {}",
                    orbit[0],
                    orbit.len(),
                    self.group.order()
                )));
            }
            let rep = orbit[0];
            for g in self.group.elements() {
                coords[self.apply(g, rep)] = Some((o, g));
            }
        }
        Ok(coords.into_iter().map(|c| c.expect("orbits cover all labels")).collect())
    }
}
