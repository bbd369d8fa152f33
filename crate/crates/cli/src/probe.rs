//! Linear probe on frozen backbone features.

use std::path::Path;

use anyhow::{bail, Context, Result};
use equivar_core::data::{batches, import_ppm_dir, Dataset};
use equivar_core::nn::{group_average, Backbone, BatchStats, Checkpoint, Mode, ParamStore, Schedule, Sgd};
use equivar_core::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::metrics::{MetricsLog, Summary};
use crate::train::load_dataset;

const FEATURE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of samples held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl ProbeSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.probe_epochs,
            lr: cfg.probe_lr,
            momentum: cfg.momentum,
            batch_size: cfg.probe_batch,
            holdout: cfg.probe_holdout,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub train_top1: f64,
    /// Accuracy on the held-out part (the training accuracy when nothing is
    /// held out).
    pub test_top1: f64,
    pub per_epoch: Vec<f64>,
}

/// Rebuilds the backbone described by `cfg` and loads its weights from a
/// checkpoint store by parameter name.
pub fn restore_backbone<T: Scalar>(cfg: &RunConfig, ckpt: &ParamStore<T>) -> Result<(Backbone, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(cfg.backbone(), &mut store, "backbone", &mut ChaCha8Rng::seed_from_u64(0))?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = ckpt
            .find(&name)
            .with_context(|| format!("checkpoint lacks backbone parameter {name}"))?;
        store.set(id, ckpt.get(src).clone())?;
    }
    Ok((backbone, store))
}

/// Pooled features `[N, D]` of every image, batch norm in eval mode.
pub fn extract_features<T: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<T>,
    data: &Dataset<T>,
    average: bool,
) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(data.len() * backbone.feature_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(FEATURE_CHUNK) {
        let tape = Tape::new();
        let bound = store.bind(&tape, true);
        let x = tape.constant(data.batch(chunk)?);
        let mut f = backbone.forward(&tape, &bound, store, x, Mode::Eval, &mut BatchStats::new())?;
        if average {
            f = group_average(&tape, f, backbone.group())?;
        }
        rows.extend_from_slice(tape.value(f).data());
    }
    Ok(Tensor::new(vec![data.len(), backbone.feature_dim()], rows)?)
}

fn standardize<T: Scalar>(x: &Tensor<T>, fit_rows: &[usize]) -> Tensor<T> {
    let d = x.shape()[1];
    let data = x.data();
    let n = fit_rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &r in fit_rows {
        for j in 0..d {
            mean[j] += data[r * d + j].as_f64() / n;
        }
    }
    for &r in fit_rows {
        for j in 0..d {
            var[j] += (data[r * d + j].as_f64() - mean[j]).powi(2) / n;
        }
    }
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let j = i % d;
        T::of((data[i].as_f64() - mean[j]) / (var[j].sqrt() + 1e-6))
    })
}

fn accuracy<T: Scalar>(x: &Tensor<T>, labels: &[usize], rows: &[usize], w: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let tape = Tape::new();
    let xs = tape.constant(x.take(rows)?);
    let logits = tape.add_channel(tape.matmul(xs, tape.constant(w.clone()))?, tape.constant(b.clone()), 1)?;
    let z = tape.value(logits);
    let k = z.shape()[1];
    let correct = z
        .data()
        .chunks_exact(k)
        .zip(rows)
        .filter(|(row, &r)| {
            let best = (0..k)
                .max_by(|&a, &c| row[a].partial_cmp(&row[c]).expect("finite logits").then(c.cmp(&a)))
                .expect("at least one class");
            best == labels[r]
        })
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

/// Softmax regression on fixed features with momentum SGD.
pub fn linear_probe<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    classes: usize,
    s: &ProbeSettings,
) -> Result<ProbeResult> {
    let n = features.shape()[0];
    if labels.len() != n {
        bail!("{} labels for {n} feature rows", labels.len());
    }
    if classes < 2 {
        bail!("probe needs at least two classes");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));
    let n_test = (n as f64 * s.holdout).round() as usize;
    let (test, train) = order.split_at(n_test);
    let (test, train) = (test.to_vec(), train.to_vec());
    let x = standardize(features, &train);
    let d = x.shape()[1];

    let mut store = ParamStore::<T>::new();
    let w = store.add("probe.w", Tensor::zeros(vec![d, classes]));
    let b = store.add("probe.b", Tensor::zeros(vec![classes]));
    let bs = s.batch_size.min(train.len());
    let per_epoch = train.len() / bs;
    let mut opt = Sgd::new(s.lr, s.momentum, 0.0, Schedule::Cosine { total: per_epoch * s.epochs })?;
    let eval_rows = if test.is_empty() { &train } else { &test };
    let mut per_epoch_acc = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        for block in batches(train.len(), bs, s.seed.wrapping_add(epoch as u64))? {
            let rows: Vec<usize> = block.iter().map(|&i| train[i]).collect();
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let tape = Tape::new();
            let bound = store.bind(&tape, false);
            let xs = tape.constant(x.take(&rows)?);
            let logits = tape.add_channel(tape.matmul(xs, bound.var(w))?, bound.var(b), 1)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?;
            opt.step(&mut store, &bound, &grads)?;
        }
        per_epoch_acc.push(accuracy(&x, labels, eval_rows, store.get(w), store.get(b))?);
    }
    Ok(ProbeResult {
        train_top1: accuracy(&x, labels, &train, store.get(w), store.get(b))?,
        test_top1: *per_epoch_acc.last().unwrap_or(&0.0),
        per_epoch: per_epoch_acc,
    })
}

/// Probes the checkpoint in `run_dir` on its configured dataset, or on
/// `data` when given (a dataset stem or a PPM directory). Appends the result to the run summary and writes
/// `probe.csv`.
pub fn probe_run(run_dir: &Path, data: Option<&Path>) -> Result<ProbeResult> {
    let cfg = RunConfig::load(&run_dir.join("config.txt"))?;
    match cfg.precision {
        Precision::F32 => probe_as::<f32>(&cfg, run_dir, data),
        Precision::F64 => probe_as::<f64>(&cfg, run_dir, data),
    }
}

fn probe_as<T: Scalar>(cfg: &RunConfig, run_dir: &Path, data: Option<&Path>) -> Result<ProbeResult> {
    let ckpt = Checkpoint::<T>::load(&run_dir.join("checkpoint"))?;
    let (backbone, store) = restore_backbone(cfg, &ckpt.params)?;
    let ds: Dataset<T> = match data {
        Some(dir) if dir.is_dir() => import_ppm_dir(dir)?,
        Some(stem) => Dataset::load(stem)?,
        None => load_dataset(&cfg.data)?,
    };
    let labels = ds.labels().context("probe dataset has no labels")?.to_vec();
    let features = extract_features(&backbone, &store, &ds, cfg.probe_group_average)?;
    let result = linear_probe(&features, &labels, ds.classes(), &ProbeSettings::from_config(cfg))?;

    let mut log = MetricsLog::new();
    for (e, &a) in result.per_epoch.iter().enumerate() {
        log.push_probe(e + 1, a)?;
    }
    log.write_probe_csv(&run_dir.join("probe.csv"))?;
    let summary_path = run_dir.join("summary.txt");
    let mut summary = if summary_path.exists() {
        Summary::read(&summary_path)?
    } else {
        Summary::default()
    };
    summary.set("probe_top1", result.test_top1);
    summary.set("probe_train_top1", result.train_top1);
    summary.write(&summary_path)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Well-separated clusters, one hot coordinate per class plus noise.
    fn blobs(n: usize, classes: usize, d: usize) -> (Tensor<f64>, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x = Tensor::from_fn(vec![n, d], |i| {
            let (row, j) = (i / d, i % d);
            let center = if j == labels[row] { 4.0 } else { 0.0 };
            center + r.random_range(-1.0..1.0)
        });
        (x, labels)
    }

    #[test]
    fn separable_features_are_learned() {
        let (x, y) = blobs(200, 4, 6);
        let s = ProbeSettings {
            epochs: 30,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 32,
            holdout: 0.25,
            seed: 1,
        };
        let r = linear_probe(&x, &y, 4, &s).unwrap();
        assert!(r.train_top1 >= 0.95 && r.test_top1 >= 0.95, "{r:?}");
        assert_eq!(r.per_epoch.len(), 30);
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let (x, y) = blobs(20, 2, 3);
        let s = ProbeSettings {
            epochs: 1,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 8,
            holdout: 0.0,
            seed: 0,
        };
        assert!(linear_probe(&x, &y[..19], 2, &s).is_err());
    }
}
