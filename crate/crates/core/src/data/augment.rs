use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::group::{apply_grid, FiniteGroup, GroupKind, GridAction};
use crate::tensor::{Scalar, Tensor};

const FLIP: usize = 4;

/// Per-op probabilities plus the stream seed. `crop_min` is the smallest
/// kept side as a fraction of the extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub crop: f64,
    pub crop_min: f64,
    pub hflip: f64,
    pub rot90: f64,
    pub grayscale: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn identity(seed: u64) -> Self {
        Self {
            crop: 0.0,
            crop_min: 1.0,
            hflip: 0.0,
            rot90: 0.0,
            grayscale: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("crop", self.crop),
            ("crop_min", self.crop_min),
            ("hflip", self.hflip),
            ("rot90", self.rot90),
            ("grayscale", self.grayscale),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("augmentation {name} = {p} outside [0, 1]")));
            }
        }
        if self.crop_min == 0.0 {
            return Err(Error::Parameter("augmentation crop_min must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop: 0.8,
            crop_min: 0.6,
            hflip: 0.5,
            rot90: 0.0,
            grayscale: 0.2,
            seed: 0,
        }
    }
}

/// Applies an [`AugmentationSpec`]; grid actions are cached per extent.
#[derive(Debug, Clone)]
pub struct Augmenter {
    spec: AugmentationSpec,
    group: FiniteGroup,
    actions: BTreeMap<usize, GridAction>,
}

impl Augmenter {
    pub fn new(spec: AugmentationSpec, extents: &[usize]) -> Result<Self> {
        spec.validate()?;
        let group = FiniteGroup::new(GroupKind::Rot4Flip);
        let actions = extents
            .iter()
            .map(|&n| Ok((n, GridAction::new(&group, n)?)))
            .collect::<Result<_>>()?;
        Ok(Self { spec, group, actions })
    }

    pub fn spec(&self) -> &AugmentationSpec {
        &self.spec
    }

    fn rng(&self, draw: u64, view: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ view.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(draw);
        rng
    }

    /// The two views used by every objective.
    pub fn augment<T: Scalar>(&self, image: &Tensor<T>, draw: u64) -> Result<[Tensor<T>; 2]> {
        let n = image.shape().get(1).copied().unwrap_or(0);
        Ok([self.view(image, draw, 0, n)?, self.view(image, draw, 1, n)?])
    }

    /// View number `view` of `image` (`[C, n, n]`) at output extent `out`.
    /// At full extent a crop keeps its location and zeroes the rest; smaller
    /// extents cut a random window of that size.
    pub fn view<T: Scalar>(&self, image: &Tensor<T>, draw: u64, view: u64, out: usize) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Extent(format!("augment expects [C, n, n], got {s:?}")));
        }
        let (c, n) = (s[0], s[1]);
        if out == 0 || out > n {
            return Err(Error::Extent(format!("view extent {out} for an image of extent {n}")));
        }
        let action = self
            .actions
            .get(&out)
            .ok_or_else(|| Error::Extent(format!("augmenter has no grid action for extent {out}")))?;
        let sp = &self.spec;
        let mut rng = self.rng(draw, view);
        // fixed draw count so one op's outcome never shifts another's stream
        let do_crop = rng.random::<f64>() < sp.crop;
        let frac = rng.random_range(sp.crop_min..=1.0);
        let (fy, fx): (f64, f64) = (rng.random(), rng.random());
        let do_flip = rng.random::<f64>() < sp.hflip;
        let do_rot = rng.random::<f64>() < sp.rot90;
        let turns = rng.random_range(1..4usize);
        let do_gray = rng.random::<f64>() < sp.grayscale;

        let d = image.data();
        let mut x = if out < n {
            let (top, left) = (
                (fy * (n - out + 1) as f64) as usize,
                (fx * (n - out + 1) as f64) as usize,
            );
            let top = top.min(n - out);
            let left = left.min(n - out);
            Tensor::from_fn(vec![c, out, out], |f| {
                let (ch, r, col) = (f / (out * out), f / out % out, f % out);
                d[ch * n * n + (top + r) * n + left + col]
            })
        } else if do_crop {
            let side = ((frac * n as f64).round() as usize).clamp(1, n);
            let top = ((fy * (n - side + 1) as f64) as usize).min(n - side);
            let left = ((fx * (n - side + 1) as f64) as usize).min(n - side);
            Tensor::from_fn(vec![c, n, n], |f| {
                let (r, col) = (f / n % n, f % n);
                if (top..top + side).contains(&r) && (left..left + side).contains(&col) {
                    d[f]
                } else {
                    T::zero()
                }
            })
        } else {
            image.clone()
        };
        let g = match (do_rot, do_flip) {
            (false, false) => 0,
            (true, false) => turns,
            (false, true) => FLIP,
            (true, true) => self.group.compose(turns, FLIP),
        };
        if g != 0 {
            x = apply_grid(action, g, &x)?;
        }
        if do_gray && c == 3 {
            let plane = out * out;
            let xd = x.data();
            let luma: Vec<T> = (0..plane)
                .map(|p| T::of(0.299) * xd[p] + T::of(0.587) * xd[plane + p] + T::of(0.114) * xd[2 * plane + p])
                .collect();
            x = Tensor::new(vec![3, out, out], luma.repeat(3))?;
        }
        Ok(x)
    }

    /// View `view` of each listed sample stacked to `[B, C, out, out]`. The
    /// draw index of sample `i` in epoch `e` is `e * len + i`.
    pub fn batch_view<T: Scalar>(
        &self,
        data: &Dataset<T>,
        indices: &[usize],
        epoch: u64,
        view: u64,
        out: usize,
    ) -> Result<Tensor<T>> {
        let views = indices
            .iter()
            .map(|&i| self.view(&data.image(i), epoch * data.len() as u64 + i as u64, view, out))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&views)
    }
}
