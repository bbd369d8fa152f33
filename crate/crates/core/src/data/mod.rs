//! Datasets, the synthetic image generator, deterministic augmentations and
//! seeded minibatching.

mod augment;
mod io;
mod synth;

pub use augment::{AugmentationSpec, Augmenter};
pub use io::{import_ppm_dir, read_ppm};
pub use synth::synth_dataset;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Square images `[N, C, n, n]` with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Option<Vec<usize>>,
    classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Extent(format!("dataset images {s:?} are not [N, C, n, n]")));
        }
        if let Some(l) = &labels {
            if l.len() != s[0] {
                return Err(Error::Structure(format!("{} labels for {} images", l.len(), s[0])));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Parameter(format!("label {bad} >= {classes} classes")));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn extent(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Image `i` as `[C, n, n]`.
    pub fn image(&self, i: usize) -> Tensor<T> {
        self.images.select(i).expect("index in range")
    }

    /// Images at `indices` stacked to `[B, C, n, n]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        self.images.take(indices)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Splits off the samples at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.images.take(indices)?, labels, self.classes)
    }
}

/// Index blocks for one epoch: a seeded shuffle cut into full batches; the
/// trailing partial batch is dropped.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Parameter(format!(
            "batch size {batch_size} for {len} samples"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}
