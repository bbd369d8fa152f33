//! Equivariant pretext tasks: relative-position (context) prediction and
//! jigsaw puzzles, with label spaces that carry a group action.

mod jigsaw;
mod model;

pub use jigsaw::{
    extract_jigsaw, generate_closed_subset, grid_permutation, hamming, JigsawSample, Permutation,
    PermutationSubset, CANDIDATE_POOL,
};
pub use model::{stack_patches, HeadKind, PatchClassifier, PatchClassifierConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{FiniteGroup, GridAction, GroupKind, LabelAction};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Neighbor names in label order.
pub const CONTEXT_LABELS: [&str; 8] = [
    "left",
    "down",
    "right",
    "up",
    "upper-left",
    "lower-left",
    "lower-right",
    "upper-right",
];

/// `(row, col)` offset of each neighbor from the center cell.
const CONTEXT_OFFSETS: [(isize, isize); 8] = [
    (0, -1),
    (1, 0),
    (0, 1),
    (-1, 0),
    (-1, -1),
    (1, -1),
    (1, 1),
    (-1, 1),
];

/// Raster index (0..9) of the 3x3 cell holding context neighbor `label`.
pub fn context_cell(label: usize) -> usize {
    let (dr, dc) = CONTEXT_OFFSETS[label];
    ((1 + dr) * 3 + (1 + dc)) as usize
}

/// A centered 3x3 grid of square patches separated by `gap` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub extent: usize,
    pub patch: usize,
    pub gap: usize,
}

impl PatchGrid {
    /// Largest patch size whose grid fits the image with an even margin, so
    /// that the grid is centered and maps onto itself under the group.
    pub fn fit(extent: usize, gap: usize) -> Result<Self> {
        let patch = (1..=extent / 3)
            .rev()
            .find(|&p| extent >= 3 * p + 2 * gap && (extent - 3 * p - 2 * gap).is_multiple_of(2))
            .ok_or_else(|| Error::Extent(format!("image extent {extent} cannot hold a 3x3 grid with gap {gap}")))?;
        Ok(Self { extent, patch, gap })
    }

    pub fn new(extent: usize, patch: usize, gap: usize) -> Result<Self> {
        if patch == 0 || extent < 3 * patch + 2 * gap {
            return Err(Error::Extent(format!(
                "image extent {extent} < 3*{patch} + 2*{gap}"
            )));
        }
        if !(extent - 3 * patch - 2 * gap).is_multiple_of(2) {
            return Err(Error::Extent(format!(
                "grid of patch {patch} and gap {gap} cannot be centered in {extent}"
            )));
        }
        Ok(Self { extent, patch, gap })
    }

    fn margin(&self) -> usize {
        (self.extent - 3 * self.patch - 2 * self.gap) / 2
    }

    /// Top-left pixel of raster cell `cell` (0..9).
    pub fn origin(&self, cell: usize) -> (usize, usize) {
        let step = self.patch + self.gap;
        let m = self.margin();
        (m + (cell / 3) * step, m + (cell % 3) * step)
    }

    fn cut<T: Scalar>(&self, image: &Tensor<T>, row: usize, col: usize) -> Tensor<T> {
        let s = image.shape();
        let (n, p) = (s[1], self.patch);
        Tensor::from_fn(vec![s[0], p, p], |i| {
            let (c, r, q) = (i / (p * p), (i / p) % p, i % p);
            image.data()[(c * n + row + r) * n + col + q]
        })
    }

    /// Patch of cell `cell`, optionally shifted by up to `jitter` pixels in
    /// each direction (clamped to the image).
    pub fn patch_at<T: Scalar, R: Rng + ?Sized>(
        &self,
        image: &Tensor<T>,
        cell: usize,
        jitter: Option<(&mut R, usize)>,
    ) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let (mut row, mut col) = self.origin(cell);
        if let Some((rng, j)) = jitter {
            let hi = (self.extent - self.patch) as i64;
            let j = j as i64;
            row = (row as i64 + rng.random_range(-j..=j)).clamp(0, hi) as usize;
            col = (col as i64 + rng.random_range(-j..=j)).clamp(0, hi) as usize;
        }
        Ok(self.cut(image, row, col))
    }

    fn check_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[1] != s[2] || s[1] != self.extent {
            return Err(Error::Extent(format!(
                "image {s:?} for a patch grid of extent {}",
                self.extent
            )));
        }
        Ok(())
    }
}

/// Center patch, one neighbor patch and the neighbor's label.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample<T> {
    pub center: Tensor<T>,
    pub neighbor: Tensor<T>,
    pub label: usize,
}

/// Cuts the center patch and neighbor `label` from `image: [C, n, n]`.
/// Without jitter the extraction is exact and deterministic.
pub fn extract_context<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    label: usize,
    grid: &PatchGrid,
    mut jitter: Option<(&mut R, usize)>,
) -> Result<ContextSample<T>> {
    if label >= 8 {
        return Err(Error::Parameter(format!("context label {label} >= 8")));
    }
    let mut take = |cell| match jitter.as_mut() {
        Some((rng, j)) => grid.patch_at(image, cell, Some((&mut **rng, *j))),
        None => grid.patch_at::<T, R>(image, cell, None),
    };
    let center = take(4)?;
    let neighbor = take(context_cell(label))?;
    Ok(ContextSample {
        center,
        neighbor,
        label,
    })
}

/// How the rotation group relabels neighbors, read off the grid geometry.
pub fn context_label_action(group: &FiniteGroup) -> Result<LabelAction> {
    if group.kind() != Some(GroupKind::Rot4) {
        return Err(Error::Group(format!(
            "context labels carry a free action of rot4 only, got {:?}",
            group.kind()
        )));
    }
    let cells = GridAction::new(group, 3)?;
    let perms = group
        .elements()
        .map(|g| {
            (0..8)
                .map(|l| {
                    let moved = cells.forward_map(g)[context_cell(l)];
                    (0..8).find(|&m| context_cell(m) == moved).expect("neighbors map to neighbors")
                })
                .collect()
        })
        .collect();
    LabelAction::new(group, perms)
}

/// Mean softmax cross-entropy of `[B, L]` logits.
pub fn pretext_loss<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}
