use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const NOISE_STD: f64 = 0.03;

/// Class texture at centered coordinates `(x, y)` in `[-1, 1]`. Shapes are
/// drawn in a frame rotated by `theta`; with `theta` uniform every family is
/// closed under quarter turns and mirror images.
fn texture(class: usize, x: f64, y: f64, freq: f64, theta: f64, phase: f64) -> f64 {
    let (u, v) = (x * theta.cos() + y * theta.sin(), -x * theta.sin() + y * theta.cos());
    match class % 4 {
        // bars
        0 => (PI * freq * u + phase).cos(),
        // corner: an L-shaped stroke whose arms sit at a class-specific offset
        1 => {
            let a = 0.15 * freq - 0.5;
            let w = 0.12;
            let on = ((u - a).abs() < w && v > a - w) || ((v - a).abs() < w && u > a - w);
            if on {
                1.0
            } else {
                -1.0
            }
        }
        // gradient
        2 => (0.5 * PI * freq * u / 2.0 + phase / 4.0).sin(),
        // rings
        _ => (2.0 * PI * freq * (x * x + y * y).sqrt() + phase).cos(),
    }
}

/// `classes * per_class` RGB images of extent `n`: a bright radial envelope
/// times a class shape (bars, corners, gradients, rings) with random orientation, phase and tint, plus
/// noise. Labels are sorted by class.
pub fn synth_dataset<T: Scalar>(classes: usize, per_class: usize, extent: usize, seed: u64) -> Result<Dataset<T>> {
    if extent < 16 {
        return Err(Error::Extent(format!("synthetic extent {extent} < 16")));
    }
    if classes == 0 || per_class == 0 {
        return Err(Error::Parameter("need at least one class and sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let n = extent;
    let total = classes * per_class;
    let mut data = Vec::with_capacity(total * 3 * n * n);
    let mut labels = Vec::with_capacity(total);
    for class in 0..classes {
        let freq = 1.5 + (class / 4) as f64;
        for _ in 0..per_class {
            let theta = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let width = rng.random_range(0.45..0.65);
            let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.0)).collect();
            let mut plane = vec![0.0; n * n];
            for (i, v) in plane.iter_mut().enumerate() {
                let y = (2.0 * (i / n) as f64 + 1.0) / n as f64 - 1.0;
                let x = (2.0 * (i % n) as f64 + 1.0) / n as f64 - 1.0;
                let env = (-(x * x + y * y) / (2.0 * width * width)).exp();
                *v = env * (0.6 + 0.4 * texture(class, x, y, freq, theta, phase));
            }
            for c in tint {
                data.extend(plane.iter().map(|&p| T::of(c * p + noise.sample(&mut rng))));
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![total, 3, n, n], data)?, Some(labels), classes)
}
