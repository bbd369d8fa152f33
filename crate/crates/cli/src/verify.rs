//! Property suites behind `equivar verify`.
//!
//! Every suite records named checks with a measured value and the bound it
//! was held to. The manifest maps each module invariant to the suites that
//! exercise it, and the run itself fails if an invariant is left uncovered.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use equivar_core::contrastive::{
    embed, invariant_inner, moco_forward, moco_loss, simsiam_forward, simsiam_loss, sinkhorn_knopp,
    swav_forward, swav_loss, ContrastiveNet, ContrastiveNetConfig, FeatureQueue, MocoConfig,
    MomentumEncoder, Prototypes, SimSiamConfig, SwavConfig,
};
use equivar_core::data::{synth_dataset, AugmentationSpec, Augmenter};
use equivar_core::group::{apply_grid, FiniteGroup, GridAction, GroupKind, LabelAction};
use equivar_core::nn::{
    group_conv, group_linear, lifting_conv, Backbone, BackboneConfig, BatchStats, Checkpoint, EquivariantHead,
    GroupFeatureMap, Mode, ParamStore, PooledFeature,
};
use equivar_core::pretext::{
    context_label_action, extract_context, extract_jigsaw, generate_closed_subset, grid_permutation,
    hamming, pretext_loss, stack_patches, HeadKind, PatchClassifier, PatchClassifierConfig, PatchGrid,
    Permutation,
};
use equivar_core::tensor::grad_check;
use equivar_core::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, Precision, RunConfig, Task};
use crate::metrics::{MetricsLog, StepRecord};
use crate::train::pretrain;

type NoRng = ChaCha8Rng;

/// Module invariants that `verify` must cover.
pub const INVARIANTS: &[&str] = &[
    "tensor_autodiff.finite_difference_gradients",
    "tensor_autodiff.conv2d_loop_oracle",
    "tensor_autodiff.stop_gradient",
    "group_algebra.axioms",
    "group_algebra.left_action",
    "equivariant_nn.layer_equivariance",
    "equivariant_nn.group_average_invariance",
    "equivariant_nn.norm_preservation",
    "equivariant_nn.head_intertwining",
    "pretext_tasks.context_label_equivariance",
    "pretext_tasks.jigsaw_closure_freeness_hamming",
    "pretext_tasks.loss_consistency",
    "invariant_contrastive.loss_invariance",
    "invariant_contrastive.invariant_inner_identity",
    "invariant_contrastive.moco_query_gradient",
    "invariant_contrastive.sinkhorn_rows",
    "invariant_contrastive.ema_and_fifo",
    "data_pipeline.determinism",
    "data_pipeline.view_shape",
    "cli_harness.config_invariants",
    "cli_harness.metrics_monotone",
    "cli_harness.reproducibility",
    "cli_harness.coverage",
];

/// Suite name and the invariants it exercises.
pub const MANIFEST: &[(&str, &[&str])] = &[
    ("group_axioms", &["group_algebra.axioms"]),
    ("grid_action", &["group_algebra.left_action"]),
    ("conv_oracle", &["tensor_autodiff.conv2d_loop_oracle"]),
    ("stop_gradient", &["tensor_autodiff.stop_gradient"]),
    (
        "gradient_check",
        &[
            "tensor_autodiff.finite_difference_gradients",
            "invariant_contrastive.moco_query_gradient",
        ],
    ),
    ("layer_equivariance", &["equivariant_nn.layer_equivariance"]),
    (
        "pooled_features",
        &[
            "equivariant_nn.group_average_invariance",
            "equivariant_nn.norm_preservation",
            "equivariant_nn.head_intertwining",
        ],
    ),
    (
        "label_equivariance",
        &["pretext_tasks.context_label_equivariance", "pretext_tasks.loss_consistency"],
    ),
    ("subset_closure", &["pretext_tasks.jigsaw_closure_freeness_hamming"]),
    ("invariant_loss", &["invariant_contrastive.loss_invariance"]),
    ("invariant_inner", &["invariant_contrastive.invariant_inner_identity"]),
    ("sinkhorn", &["invariant_contrastive.sinkhorn_rows"]),
    ("state", &["invariant_contrastive.ema_and_fifo", "cli_harness.metrics_monotone"]),
    ("data_pipeline", &["data_pipeline.view_shape", "data_pipeline.determinism"]),
    ("config", &["cli_harness.config_invariants"]),
    ("reproducibility", &["cli_harness.reproducibility", "data_pipeline.determinism"]),
    ("coverage", &["cli_harness.coverage"]),
];

/// Invariants no manifest entry points at.
pub fn coverage_gaps() -> Vec<&'static str> {
    let covered: HashSet<&str> = MANIFEST.iter().flat_map(|(_, inv)| inv.iter().copied()).collect();
    INVARIANTS.iter().copied().filter(|i| !covered.contains(i)).collect()
}

/// Threshold used wherever the run precision matters.
pub fn profile_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-8,
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub precision: Precision,
    pub groups: Vec<GroupKind>,
    /// Negative control: adds a group with a damaged Cayley table.
    pub corrupt_cayley: bool,
    /// Suite names to run; empty runs all of them.
    pub only: Vec<String>,
    /// Scratch directory for the reproducibility runs.
    pub scratch: PathBuf,
}

impl VerifyOptions {
    pub fn new(precision: Precision, scratch: impl Into<PathBuf>) -> Self {
        Self {
            precision,
            groups: vec![GroupKind::Rot4, GroupKind::Rot2Flip, GroupKind::Rot4Flip],
            corrupt_cayley: false,
            only: Vec::new(),
            scratch: scratch.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    Above,
    Exact,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub check: String,
    pub passed: bool,
    pub value: f64,
    pub bound: Bound,
    pub tolerance: f64,
}

#[derive(Debug, Default)]
struct Recorder {
    suite: &'static str,
    checks: Vec<Check>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            checks: Vec::new(),
        }
    }

    fn push(&mut self, check: String, passed: bool, value: f64, bound: Bound, tolerance: f64) {
        self.checks.push(Check {
            suite: self.suite,
            check,
            passed,
            value,
            bound,
            tolerance,
        });
    }

    fn at_most(&mut self, check: impl Into<String>, value: f64, tol: f64) {
        self.push(check.into(), value <= tol, value, Bound::AtMost, tol);
    }

    fn above(&mut self, check: impl Into<String>, value: f64, floor: f64) {
        self.push(check.into(), value > floor, value, Bound::Above, floor);
    }

    /// Counts mismatches; passes only at zero.
    fn exact(&mut self, check: impl Into<String>, mismatches: usize) {
        self.push(check.into(), mismatches == 0, mismatches as f64, Bound::Exact, 0.0);
    }

    fn holds(&mut self, check: impl Into<String>, ok: bool) {
        self.exact(check, usize::from(!ok));
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub precision: Precision,
    pub checks: Vec<Check>,
    pub suite_seconds: Vec<(&'static str, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn suite(&self, name: &str) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.suite == name).collect()
    }

    pub fn suite_passed(&self, name: &str) -> bool {
        let checks = self.suite(name);
        !checks.is_empty() && checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (suite, secs) in &self.suite_seconds {
            let checks = self.suite(suite);
            let failed = checks.iter().filter(|c| !c.passed).count();
            let status = if failed == 0 { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{status} {suite}: {} checks, {failed} failed ({secs:.2}s)", checks.len());
            for c in checks.iter().filter(|c| !c.passed) {
                let _ = writeln!(s, "    FAIL {}/{}: {}", c.suite, c.check, describe(c));
            }
        }
        let total = self.checks.len();
        let failed = self.failures().len();
        let _ = writeln!(
            s,
            "{} checks, {} failed, precision {}",
            total,
            failed,
            self.precision.name()
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["suite", "check", "status", "value", "tolerance"])?;
        for c in &self.checks {
            let bound = match c.bound {
                Bound::AtMost => format!("<={:e}", c.tolerance),
                Bound::Above => format!(">{:e}", c.tolerance),
                Bound::Exact => "exact".to_string(),
            };
            w.write_record([
                c.suite,
                &c.check,
                if c.passed { "pass" } else { "fail" },
                &format!("{:e}", c.value),
                &bound,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn describe(c: &Check) -> String {
    match c.bound {
        Bound::AtMost => format!("{:e} > {:e}", c.value, c.tolerance),
        Bound::Above => format!("{:e} <= {:e}", c.value, c.tolerance),
        Bound::Exact => format!("{} mismatches", c.value),
    }
}

type SuiteFn = fn(&mut Recorder, &VerifyOptions) -> Result<()>;

fn suite_table() -> Vec<(&'static str, SuiteFn)> {
    vec![
        ("group_axioms", group_axioms),
        ("grid_action", grid_action),
        ("conv_oracle", conv_oracle),
        ("stop_gradient", stop_gradient),
        ("gradient_check", gradient_check),
        ("layer_equivariance", |r, o| dispatch(r, o, layer_equivariance::<f32>, layer_equivariance::<f64>)),
        ("pooled_features", |r, o| dispatch(r, o, pooled_features::<f32>, pooled_features::<f64>)),
        ("label_equivariance", |r, o| dispatch(r, o, label_equivariance::<f32>, label_equivariance::<f64>)),
        ("subset_closure", subset_closure),
        ("invariant_loss", |r, o| dispatch(r, o, invariant_loss::<f32>, invariant_loss::<f64>)),
        ("invariant_inner", invariant_inner_suite),
        ("sinkhorn", sinkhorn),
        ("state", state),
        ("data_pipeline", data_pipeline),
        ("config", config_suite),
        ("reproducibility", reproducibility),
        ("coverage", coverage),
    ]
}

fn dispatch(r: &mut Recorder, o: &VerifyOptions, f32_suite: SuiteFn, f64_suite: SuiteFn) -> Result<()> {
    match o.precision {
        Precision::F32 => f32_suite(r, o),
        Precision::F64 => f64_suite(r, o),
    }
}

pub fn suite_names() -> Vec<&'static str> {
    suite_table().into_iter().map(|(n, _)| n).collect()
}

/// Runs the selected suites concurrently, each on its own fixtures.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let table = suite_table();
    for name in &opts.only {
        ensure!(
            table.iter().any(|(n, _)| n == name),
            "unknown suite {name:?}; known suites: {}",
            suite_names().join(", ")
        );
    }
    let selected: Vec<_> = table
        .into_iter()
        .filter(|(n, _)| opts.only.is_empty() || opts.only.iter().any(|o| o == n))
        .collect();
    let results: Vec<(Recorder, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&(name, f)| {
                scope.spawn(move || {
                    let started = Instant::now();
                    let mut rec = Recorder::new(name);
                    if let Err(e) = f(&mut rec, opts) {
                        rec.holds(format!("error: {e:#}"), false);
                    }
                    (rec, started.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .zip(&selected)
            .map(|(h, &(name, _))| {
                h.join().unwrap_or_else(|_| {
                    let mut rec = Recorder::new(name);
                    rec.holds("panicked", false);
                    (rec, 0.0)
                })
            })
            .collect()
    });
    let mut checks = Vec::new();
    let mut suite_seconds = Vec::new();
    for (rec, secs) in results {
        suite_seconds.push((rec.suite, secs));
        checks.extend(rec.checks);
    }
    Ok(VerifyReport {
        precision: opts.precision,
        checks,
        suite_seconds,
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng(seed)).cast()
}

// ---- group_algebra ----

fn group_axioms(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    for &kind in &o.groups {
        let group = FiniteGroup::new(kind);
        r.exact(format!("{kind}/cayley"), group.axiom_violations().len());
        let bad_transforms = group
            .elements()
            .flat_map(|a| group.elements().map(move |b| (a, b)))
            .filter(|&(a, b)| group.transform(a).compose(group.transform(b)) != group.transform(group.compose(a, b)))
            .count();
        r.exact(format!("{kind}/matrix_homomorphism"), bad_transforms);
    }
    if o.corrupt_cayley {
        let group = FiniteGroup::new(GroupKind::Rot4);
        let mut table = group.cayley().to_vec();
        table[1].swap(1, 2);
        let broken = group.with_cayley_unchecked(table);
        r.exact("rot4_corrupted/cayley", broken.axiom_violations().len());
    }
    Ok(())
}

fn grid_action(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    for &kind in &o.groups {
        let group = FiniteGroup::new(kind);
        for n in [1, 2, 7, 8] {
            let action = GridAction::new(&group, n)?;
            let x = randn::<f64>(&[2, n, n], n as u64);
            let mut bad = 0;
            for a in group.elements() {
                for b in group.elements() {
                    let two = apply_grid(&action, a, &apply_grid(&action, b, &x)?)?;
                    let one = apply_grid(&action, group.compose(a, b), &x)?;
                    bad += usize::from(two != one);
                }
            }
            let id_moves = usize::from(apply_grid(&action, group.identity(), &x)? != x);
            r.exact(format!("{kind}/n={n}/left_action"), bad + id_moves);
        }
    }
    Ok(())
}

// ---- tensor_autodiff ----

/// Direct nested-loop cross-correlation with zero padding.
fn conv_loop(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[oi, ci, ky, kx]) * x.at(&[bi, ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, o, ho, wo], out)?)
}

fn conv_oracle(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let mut rg = rng(0xC0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = [1, 3, 5][rg.random_range(0..3)];
        let h = rg.random_range(k.max(1)..=8);
        let wd = rg.random_range(k.max(1)..=8);
        let stride = rg.random_range(1..=2);
        let pad = rg.random_range(0..=k / 2);
        let (b, c, o) = (rg.random_range(1..3), rg.random_range(1..4), rg.random_range(1..4));
        let x = Tensor::<f64>::randn(vec![b, c, h, wd], 1.0, &mut rg);
        let w = Tensor::<f64>::randn(vec![o, c, k, k], 1.0, &mut rg);
        let tape = Tape::new();
        let y = tape.conv2d(tape.constant(x.clone()), tape.constant(w.clone()), stride, pad)?;
        worst = worst.max(tape.value(y).max_abs_diff(&conv_loop(&x, &w, stride, pad)?));
    }
    r.at_most("100_random_shapes", worst, 1e-6);
    Ok(())
}

fn stop_gradient(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let tape = Tape::<f64>::new();
    let x = tape.param(randn(&[5], 1));
    let sg = tape.stop_gradient(x);
    let loss = tape.sum(tape.mul(sg, sg)?);
    let g = tape.backward(loss)?.get_or_zeros(x, &[5]);
    r.at_most("blocked_path", g.max_abs(), 0.0);

    let tape = Tape::<f64>::new();
    let xv = randn::<f64>(&[5], 2);
    let x = tape.param(xv.clone());
    let loss = tape.sum(tape.mul(x, tape.stop_gradient(x))?);
    let g = tape.backward(loss)?.get_or_zeros(x, &[5]);
    r.at_most("live_branch_only", g.max_abs_diff(&xv), 0.0);
    Ok(())
}

fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> equivar_core::Result<Var> {
    let w = Tensor::uniform(tape.shape(y), 0.5, 1.5, &mut rng(seed));
    let p = tape.mul(y, tape.constant(w))?;
    Ok(tape.sum(p))
}

type OpFn<'a> = Box<dyn Fn(&Tape<f64>, Var) -> equivar_core::Result<Var> + 'a>;

fn gradient_check(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let other = randn::<f64>(&[3, 4], 17);
    let b = randn::<f64>(&[4, 5], 21);
    let a = randn::<f64>(&[3, 4], 22);
    let side = randn::<f64>(&[3, 2], 23);
    let gamma = Tensor::<f64>::uniform(vec![3], 0.5, 1.5, &mut rng(4));
    let beta = randn::<f64>(&[3], 5);
    let xbn = randn::<f64>(&[4, 3, 2], 6);
    let w = randn::<f64>(&[3, 2, 3, 3], 8);
    let xc = randn::<f64>(&[1, 2, 5, 5], 9);
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let xl = randn::<f64>(&[1, 2, 5, 5], 14);
    let xg = randn::<f64>(&[1, 8, 2, 5, 5], 17);
    let v = randn::<f64>(&[2, 8, 3], 20);

    let ops: Vec<(&str, Vec<usize>, OpFn)> = vec![
        ("add", vec![3, 4], Box::new(|t, v| t.add(v, t.constant(other.clone())))),
        ("sub", vec![3, 4], Box::new(|t, v| t.sub(t.constant(other.clone()), v))),
        ("mul", vec![3, 4], Box::new(|t, v| t.mul(v, t.constant(other.clone())))),
        ("mul_self", vec![3, 4], Box::new(|t, v| t.mul(v, v))),
        ("scale", vec![3, 4], Box::new(|t, v| Ok(t.scale(v, -2.5)))),
        ("add_scalar", vec![3, 4], Box::new(|t, v| Ok(t.add_scalar(v, 0.3)))),
        ("exp", vec![3, 4], Box::new(|t, v| Ok(t.exp(v)))),
        ("log", vec![3, 4], Box::new(|t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.log(t.add_scalar(sq, 0.5)))
        })),
        ("relu", vec![3, 4], Box::new(|t, v| Ok(t.relu(v)))),
        ("reshape", vec![3, 4], Box::new(|t, v| t.reshape(v, vec![2, 6]))),
        ("sum", vec![3, 4], Box::new(|t, v| Ok(t.sum(t.exp(v))))),
        ("mean", vec![3, 4], Box::new(|t, v| Ok(t.mean(t.exp(v))))),
        ("sum_axis", vec![2, 3, 4], Box::new(|t, v| t.sum_axis(v, 1))),
        ("mean_axis", vec![2, 3, 4], Box::new(|t, v| t.mean_axis(v, 2))),
        ("spatial_mean", vec![2, 3, 4, 4], Box::new(|t, v| t.spatial_mean(v))),
        ("avg_pool2d", vec![2, 3, 4, 6], Box::new(|t, v| t.avg_pool2d(v, 2))),
        ("group_mean", vec![2, 4, 3], Box::new(|t, v| t.group_mean(v, 1))),
        ("matmul_left", vec![3, 4], Box::new(|t, v| t.matmul(v, t.constant(b.clone())))),
        ("matmul_right", vec![4, 5], Box::new(|t, v| t.matmul(t.constant(a.clone()), v))),
        ("concat", vec![3, 4], Box::new(|t, v| t.concat(v, t.constant(side.clone()), 1))),
        ("concat_axis0", vec![3, 4], Box::new(|t, v| t.concat(v, v, 0))),
        ("dot_last", vec![3, 4], Box::new(|t, v| t.dot_last(v, t.constant(a.clone())))),
        ("softmax", vec![3, 5], Box::new(|t, v| t.softmax(v, 1))),
        ("log_softmax", vec![3, 5], Box::new(|t, v| t.log_softmax(v, 1))),
        ("l2_normalize", vec![3, 5], Box::new(|t, v| t.l2_normalize(v, 1, 1e-12))),
        ("batch_norm", vec![4, 3, 2, 2], Box::new(|t, v| {
            Ok(t.batch_norm(v, t.constant(gamma.clone()), t.constant(beta.clone()), 1, 1e-5)?.0)
        })),
        ("batch_norm_gamma", vec![3], Box::new(|t, v| {
            Ok(t.batch_norm(t.constant(xbn.clone()), v, t.constant(beta.clone()), 1, 1e-5)?.0)
        })),
        ("batch_norm_beta", vec![3], Box::new(|t, v| {
            Ok(t.batch_norm(t.constant(xbn.clone()), t.constant(gamma.clone()), v, 1, 1e-5)?.0)
        })),
        ("add_channel", vec![3], Box::new(|t, v| t.add_channel(t.constant(xbn.clone()), v, 1))),
        ("gather", vec![6], Box::new(|t, v| t.gather(v, Arc::new(vec![5, 0, 0, 3, 2, 2, 1, 4]), vec![2, 4]))),
        ("index_permute", vec![3, 4], Box::new(|t, v| t.index_permute(v, 1, &[2, 0, 3, 1]))),
        ("permute_axes", vec![2, 3, 4], Box::new(|t, v| t.permute_axes(v, &[2, 0, 1]))),
        ("conv2d_input", vec![1, 2, 5, 5], Box::new(|t, v| t.conv2d(v, t.constant(w.clone()), 1, 1))),
        ("conv2d_weight", vec![3, 2, 3, 3], Box::new(|t, v| t.conv2d(t.constant(xc.clone()), v, 2, 1))),
        ("cross_entropy", vec![4, 6], Box::new(|t, v| t.cross_entropy(v, &[1, 5, 0, 3]))),
        ("lifting_conv", vec![2, 2, 3, 3], Box::new(|t, v| lifting_conv(t, t.constant(xl.clone()), v, &group, 1))),
        ("group_conv", vec![8, 1, 2, 3, 3], Box::new(|t, v| group_conv(t, t.constant(xg.clone()), v, &group, 1))),
        ("group_linear", vec![8, 2, 3], Box::new(|t, w| group_linear(t, t.constant(v.clone()), w, None, &group))),
    ];
    for (i, (name, shape, f)) in ops.iter().enumerate() {
        let x = randn::<f64>(shape, 99 + i as u64);
        let err = grad_check(|t, v| weighted_sum(t, f(t, v)?, 1234), &x, 1e-5)?;
        r.at_most(format!("op/{name}"), err, 1e-4);
    }

    // losses at the looser bound
    let feats = randn::<f64>(&[3, 8, 2], 60);
    let keys = randn::<f64>(&[3, 8, 2], 61);
    let mut queue = FeatureQueue::new(8, 16);
    queue.fill_random(&mut rng(62))?;
    let err = grad_check(
        |t, x| {
            let q = embed(t, x, &group, true)?;
            let k = embed(t, t.constant(keys.clone()), &group, true)?;
            moco_loss(t, q, k, &queue, 0.2)
        },
        &feats,
        1e-6,
    )?;
    r.at_most("loss/moco_invariant_queries", err, 1e-3);

    let protos = Tensor::<f64>::randn(vec![16, 5], 1.0, &mut rng(63));
    let others: Vec<Tensor<f64>> = (0..2).map(|i| randn(&[3, 8, 2], 64 + i)).collect();
    let err = grad_check(
        |t, x| {
            let mut z = others
                .iter()
                .map(|o| embed(t, t.constant(o.clone()), &group, true))
                .collect::<equivar_core::Result<Vec<_>>>()?;
            z.push(embed(t, x, &group, true)?);
            let c = t.l2_normalize(t.constant(protos.clone()), 0, 1e-12)?;
            swav_loss(t, &z, c, 2, 0.1, 0.05, 3)
        },
        &feats,
        1e-6,
    )?;
    r.at_most("loss/swav_invariant", err, 1e-3);

    let err = grad_check(
        |t, x| {
            let p2 = t.constant(others[0].clone());
            let z1 = t.constant(others[1].clone());
            let z2 = t.constant(keys.clone());
            simsiam_loss(t, [x, p2], [z1, z2], &group, true)
        },
        &feats,
        1e-6,
    )?;
    r.at_most("loss/simsiam_invariant", err, 1e-3);
    Ok(())
}

// ---- equivariant_nn ----

fn transform_map<T: Scalar>(y: &Tensor<T>, group: &FiniteGroup, g: usize) -> Result<Tensor<T>> {
    let action = GridAction::new(group, y.shape()[4])?;
    Ok(GroupFeatureMap::new(y.clone(), group)?.transform(&action, g)?.tensor().clone())
}

fn eq_groups(o: &VerifyOptions) -> Vec<FiniteGroup> {
    o.groups.iter().map(|&k| FiniteGroup::new(k)).collect()
}

fn layer_equivariance<T: Scalar>(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    let tol = profile_tolerance(o.precision);
    for group in eq_groups(o) {
        let kind = group.kind().expect("named group");
        let n = group.order();
        let action = GridAction::new(&group, 9)?;
        let lift = |x: &Tensor<T>, w: &Tensor<T>| -> Result<Tensor<T>> {
            let tape = Tape::new();
            let y = lifting_conv(&tape, tape.constant(x.clone()), tape.constant(w.clone()), &group, 1)?;
            Ok(tape.value(y))
        };
        let gconv = |x: &Tensor<T>, w: &Tensor<T>| -> Result<Tensor<T>> {
            let tape = Tape::new();
            let y = group_conv(&tape, tape.constant(x.clone()), tape.constant(w.clone()), &group, 1)?;
            Ok(tape.value(y))
        };
        let (mut lift_worst, mut gconv_worst) = (0.0f64, 0.0f64);
        for trial in 0..20 {
            let x = randn::<T>(&[2, 3, 9, 9], 10 + trial);
            let w = randn::<T>(&[4, 3, 3, 3], 100 + trial);
            let y = lift(&x, &w)?;
            let xh = randn::<T>(&[2, n, 2, 7, 7], 200 + trial);
            let wh = randn::<T>(&[n, 3, 2, 3, 3], 300 + trial);
            let yh = gconv(&xh, &wh)?;
            for g in group.elements() {
                let lhs = lift(&apply_grid(&action, g, &x)?, &w)?;
                lift_worst = lift_worst.max(lhs.max_abs_diff(&transform_map(&y, &group, g)?));
                let lhs = gconv(&transform_map(&xh, &group, g)?, &wh)?;
                gconv_worst = gconv_worst.max(lhs.max_abs_diff(&transform_map(&yh, &group, g)?));
            }
        }
        r.at_most(format!("{kind}/lifting_conv"), lift_worst, tol);
        r.at_most(format!("{kind}/group_conv"), gconv_worst, tol);

        let mut store = ParamStore::<T>::new();
        let cfg = BackboneConfig {
            group: kind,
            in_channels: 3,
            widths: vec![8, 16, 16],
            pool_after: vec![false, true, false],
            stem_pool: 1,
            kernel: 3,
            batch_norm: true,
            scale_widths: true,
        };
        let bb = Backbone::new(cfg, &mut store, "bb", &mut rng(1))?;
        let image_action = GridAction::new(&group, 16)?;
        let run = |x: &Tensor<T>, mode: Mode| -> Result<Tensor<T>> {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let y = bb.forward(&tape, &bound, &store, tape.constant(x.clone()), mode, &mut BatchStats::new())?;
            Ok(tape.value(y))
        };
        for mode in [Mode::Train, Mode::Eval] {
            let mut worst = 0.0f64;
            for trial in 0..20 {
                let x = randn::<T>(&[2, 3, 16, 16], 800 + trial);
                let y = PooledFeature::new(run(&x, mode)?, &group)?;
                for g in group.elements() {
                    let yg = run(&apply_grid(&image_action, g, &x)?, mode)?;
                    worst = worst.max(yg.max_abs_diff(y.transform(g).tensor()));
                }
            }
            r.at_most(format!("{kind}/backbone_3_layer_{mode:?}").to_lowercase(), worst, tol);
        }
    }
    Ok(())
}

fn pooled_features<T: Scalar>(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    let tol = profile_tolerance(o.precision);
    for group in eq_groups(o) {
        let kind = group.kind().expect("named group");
        let n = group.order();
        let (mut avg_bad, mut norm_bad) = (0, 0);
        for trial in 0..20 {
            let v = PooledFeature::new(randn::<T>(&[3, n, 5], 400 + trial), &group)?;
            let avg = v.group_average();
            let norms = v.norms();
            for h in group.elements() {
                let moved = v.transform(h);
                avg_bad += usize::from(moved.group_average().tensor() != avg.tensor());
                norm_bad += usize::from(moved.norms() != norms);
            }
        }
        r.exact(format!("{kind}/group_average_bit_exact"), avg_bad);
        r.exact(format!("{kind}/norm_bit_exact"), norm_bad);

        let copies = 3;
        let head = EquivariantHead::new(LabelAction::regular_copies(&group, copies))?;
        let logits = |v: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
            let tape = Tape::new();
            let y = head.forward(&tape, tape.constant(v.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())))?;
            Ok(tape.value(y))
        };
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let v = randn::<T>(&[3, n, 6], 500 + trial);
            let w = randn::<T>(&[n, copies, 6], 600 + trial);
            let b = randn::<T>(&[copies], 700 + trial);
            let z = logits(&v, &w, &b)?;
            let pv = PooledFeature::new(v, &group)?;
            for g in group.elements() {
                let zg = logits(pv.transform(g).tensor(), &w, &b)?;
                for s in 0..3 {
                    for l in 0..head.label_count() {
                        let moved = head.action().apply(g, l);
                        worst = worst.max((zg.at(&[s, moved]).as_f64() - z.at(&[s, l]).as_f64()).abs());
                    }
                }
            }
        }
        r.at_most(format!("{kind}/head_intertwining"), worst, tol);
    }
    Ok(())
}

// ---- pretext_tasks ----

fn compose_perm(a: &Permutation, b: &Permutation) -> Permutation {
    let mut out = [0; 9];
    for k in 0..9 {
        out[k] = a[b[k] as usize];
    }
    out
}

fn patch_classifier_loss<T: Scalar>(
    model: &PatchClassifier,
    store: &ParamStore<T>,
    patches: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let logits = model.forward(&tape, &bound, store, tape.constant(patches.clone()), Mode::Train, &mut BatchStats::new())?;
    Ok(tape.value(pretext_loss(&tape, logits, labels)?).item().as_f64())
}

fn patch_backbone(group: GroupKind) -> BackboneConfig {
    BackboneConfig {
        group,
        in_channels: 3,
        widths: vec![8, 16],
        pool_after: vec![false, true],
        stem_pool: 1,
        kernel: 3,
        batch_norm: true,
        scale_widths: true,
    }
}

fn label_equivariance<T: Scalar>(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    let tol = profile_tolerance(o.precision).max(1e-12);
    let rot4 = FiniteGroup::new(GroupKind::Rot4);
    let act = context_label_action(&rot4)?;
    let grid = PatchGrid::fit(32, 1)?;
    let img_action = GridAction::new(&rot4, 32)?;
    let patch_action = GridAction::new(&rot4, grid.patch)?;
    let img = randn::<f64>(&[3, 32, 32], 2);
    let mut bad = 0;
    for l in 0..8 {
        let base = extract_context::<f64, NoRng>(&img, l, &grid, None)?;
        for g in rot4.elements() {
            let moved = apply_grid(&img_action, g, &img)?;
            let s = extract_context::<f64, NoRng>(&moved, act.apply(g, l), &grid, None)?;
            bad += usize::from(s.center != apply_grid(&patch_action, g, &base.center)?);
            bad += usize::from(s.neighbor != apply_grid(&patch_action, g, &base.neighbor)?);
        }
    }
    r.exact("context/8_labels_x_4_rotations", bad);

    let d4 = FiniteGroup::new(GroupKind::Rot4Flip);
    let img_action = GridAction::new(&d4, 32)?;
    let patch_action = GridAction::new(&d4, grid.patch)?;
    let mut rg = rng(7);
    let mut bad = 0;
    for _ in 0..100 {
        let g = rg.random_range(0..8);
        let mut sigma: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
        sigma.shuffle(&mut rg);
        let base = extract_jigsaw(&img, &sigma.map(usize::from), &grid)?;
        let acted = compose_perm(&grid_permutation(&d4, g), &sigma);
        let moved = apply_grid(&img_action, g, &img)?;
        let s = extract_jigsaw(&moved, &acted.map(usize::from), &grid)?;
        bad += usize::from(s.patches != apply_grid(&patch_action, g, &base.patches)?);
    }
    r.exact("jigsaw/pipeline_consistency_100_pairs", bad);

    // loss level: one sample transformed, its label acted on
    let mut store = ParamStore::<T>::new();
    let cfg = PatchClassifierConfig {
        backbone: patch_backbone(GroupKind::Rot4),
        patches: 2,
        hidden: 8,
        head: HeadKind::Equivariant(act.clone()),
    };
    let model = PatchClassifier::new(cfg, &mut store, &mut rng(11))?;
    let images: Vec<Tensor<T>> = (0..4).map(|i| randn(&[3, 32, 32], 20 + i)).collect();
    let labels = vec![0, 3, 5, 6];
    let build = |imgs: &[Tensor<T>], labels: &[usize]| -> Result<Tensor<T>> {
        let per = imgs
            .iter()
            .zip(labels)
            .map(|(im, &l)| {
                let s = extract_context::<T, NoRng>(im, l, &grid, None)?;
                Tensor::stack(&[s.center, s.neighbor])
            })
            .collect::<equivar_core::Result<Vec<_>>>()?;
        Ok(stack_patches(&per)?)
    };
    let rot_action = GridAction::new(&rot4, 32)?;
    let base = patch_classifier_loss(&model, &store, &build(&images, &labels)?, &labels)?;
    let mut worst = 0.0f64;
    for m in 0..4 {
        for g in rot4.elements() {
            let mut imgs = images.clone();
            let mut ls = labels.clone();
            imgs[m] = apply_grid(&rot_action, g, &images[m])?;
            ls[m] = act.apply(g, labels[m]);
            worst = worst.max((patch_classifier_loss(&model, &store, &build(&imgs, &ls)?, &ls)? - base).abs());
        }
    }
    r.at_most("context/loss_consistency", worst, tol);

    let subset = generate_closed_subset(&d4, 6, 4)?;
    let mut store = ParamStore::<T>::new();
    let cfg = PatchClassifierConfig {
        backbone: patch_backbone(GroupKind::Rot4Flip),
        patches: 9,
        hidden: 8,
        head: HeadKind::Equivariant(subset.label_action()?),
    };
    let model = PatchClassifier::new(cfg, &mut store, &mut rng(12))?;
    let images: Vec<Tensor<T>> = (0..3).map(|i| randn(&[3, 32, 32], 30 + i)).collect();
    let labels = vec![0, 17, 40];
    let build = |imgs: &[Tensor<T>], labels: &[usize]| -> Result<Tensor<T>> {
        let per = imgs
            .iter()
            .zip(labels)
            .map(|(im, &l)| Ok(extract_jigsaw(im, &subset.get(l).map(usize::from), &grid)?.patches))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack_patches(&per)?)
    };
    let base = patch_classifier_loss(&model, &store, &build(&images, &labels)?, &labels)?;
    let mut worst = 0.0f64;
    for m in 0..3 {
        for g in d4.elements() {
            let mut imgs = images.clone();
            let mut ls = labels.clone();
            imgs[m] = apply_grid(&img_action, g, &images[m])?;
            ls[m] = subset.act(&d4, g, labels[m])?;
            worst = worst.max((patch_classifier_loss(&model, &store, &build(&imgs, &ls)?, &ls)? - base).abs());
        }
    }
    r.at_most("jigsaw/loss_consistency", worst, tol);
    Ok(())
}

fn subset_closure(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let subset = generate_closed_subset(&group, 250, 0)?;
    r.exact("size_2000", subset.len().abs_diff(2000));
    let all: HashSet<Permutation> = subset.perms().iter().copied().collect();
    r.exact("distinct", subset.len() - all.len());
    let missing = subset
        .perms()
        .iter()
        .flat_map(|p| group.elements().map(|g| compose_perm(&grid_permutation(&group, g), p)))
        .filter(|q| !all.contains(q))
        .count();
    r.exact("closed_under_8_grid_permutations", missing);
    let short_orbits = subset
        .perms()
        .chunks(8)
        .filter(|orbit| orbit.iter().collect::<HashSet<_>>().len() != 8)
        .count();
    r.exact("orbits_of_size_8", short_orbits);
    let min = subset
        .perms()
        .iter()
        .enumerate()
        .flat_map(|(i, a)| subset.perms()[i + 1..].iter().map(move |b| hamming(a, b)))
        .min()
        .unwrap_or(0);
    r.holds("reported_min_hamming_matches", min == subset.min_hamming());
    r.above("min_hamming", f64::from(min), 1.0);
    r.holds("deterministic_per_seed", generate_closed_subset(&group, 250, 0)? == subset);
    r.holds(
        "label_action_is_regular",
        subset.label_action()? == LabelAction::regular_copies(&group, 250),
    );
    Ok(())
}

// ---- invariant_contrastive ----

fn net_config(kind: GroupKind, predictor: bool) -> ContrastiveNetConfig {
    ContrastiveNetConfig {
        backbone: BackboneConfig {
            group: kind,
            in_channels: 3,
            widths: vec![6, 8],
            pool_after: vec![true, false],
            stem_pool: 1,
            kernel: 3,
            batch_norm: true,
            scale_widths: true,
        },
        proj_hidden: 8,
        proj_out: 8,
        predictor_hidden: predictor.then_some(8),
    }
}

fn perturb<T: Scalar>(action: &GridAction, x: &Tensor<T>, m: usize, g: usize) -> Result<Tensor<T>> {
    let samples = (0..x.shape()[0])
        .map(|b| {
            let s = x.select(b)?;
            if b == m {
                apply_grid(action, g, &s)
            } else {
                Ok(s)
            }
        })
        .collect::<equivar_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&samples)?)
}

/// Largest and smallest loss change over every single-sample transform of
/// every view.
fn perturbation_range<T: Scalar>(
    group: &FiniteGroup,
    action: &GridAction,
    views: &[Tensor<T>],
    loss: &dyn Fn(&[Tensor<T>]) -> Result<f64>,
) -> Result<(f64, f64)> {
    let base = loss(views)?;
    let (mut worst, mut least) = (0.0f64, f64::MAX);
    for v in 0..views.len() {
        for m in 0..views[v].shape()[0] {
            for g in group.elements().skip(1) {
                let mut moved = views.to_vec();
                moved[v] = perturb(action, &views[v], m, g)?;
                let d = (loss(&moved)? - base).abs();
                worst = worst.max(d);
                least = least.min(d);
            }
        }
    }
    Ok((worst, least))
}

fn record_invariance(r: &mut Recorder, name: &str, invariant: bool, (worst, least): (f64, f64), tol: f64) {
    if invariant {
        r.at_most(format!("{name}/invariant"), worst, tol);
    } else {
        r.above(format!("{name}/plain_least_change"), least, 1e-12);
        r.above(format!("{name}/plain_worst_change"), worst, 1e-3);
    }
}

fn invariant_loss<T: Scalar>(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    let tol = profile_tolerance(o.precision);
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let action = GridAction::new(&group, 12)?;
    let views = |seed: u64, count: u64| -> Vec<Tensor<T>> { (0..count).map(|i| randn(&[4, 3, 12, 12], seed + i)).collect() };

    let mut store = ParamStore::<T>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, false), &mut store, &mut rng(21))?;
    let mut queue = FeatureQueue::new(32, net.embed_dim());
    queue.fill_random(&mut rng(22))?;
    let key = MomentumEncoder::new(&store, 0.999)?;
    let fixture = views(20, 2);
    for invariant in [true, false] {
        let cfg = MocoConfig {
            invariant,
            ..MocoConfig::default()
        };
        let loss = |v: &[Tensor<T>]| -> Result<f64> {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let (l, _) = moco_forward(&net, &tape, &bound, &store, key.params(), &queue, &v[0], &v[1], &cfg, &mut BatchStats::new())?;
            Ok(tape.value(l).item().as_f64())
        };
        record_invariance(r, "moco", invariant, perturbation_range(&group, &action, &fixture, &loss)?, tol);
    }

    let mut store = ParamStore::<T>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, false), &mut store, &mut rng(31))?;
    let protos = Prototypes::new(&mut store, net.embed_dim(), 6, &mut rng(32))?;
    let fixture = views(30, 4);
    for invariant in [true, false] {
        let cfg = SwavConfig {
            invariant,
            prototypes: 6,
            ..SwavConfig::default()
        };
        let loss = |v: &[Tensor<T>]| -> Result<f64> {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let l = swav_forward(&net, &tape, &bound, &store, protos, v, &cfg, &mut BatchStats::new())?;
            Ok(tape.value(l).item().as_f64())
        };
        record_invariance(r, "swav", invariant, perturbation_range(&group, &action, &fixture, &loss)?, tol);
    }

    let mut store = ParamStore::<T>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, true), &mut store, &mut rng(51))?;
    let fixture = views(50, 2);
    for invariant in [true, false] {
        let cfg = SimSiamConfig { invariant };
        let loss = |v: &[Tensor<T>]| -> Result<f64> {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let l = simsiam_forward(&net, &tape, &bound, &store, &v[0], &v[1], &cfg, &mut BatchStats::new())?;
            Ok(tape.value(l).item().as_f64())
        };
        record_invariance(r, "simsiam", invariant, perturbation_range(&group, &action, &fixture, &loss)?, tol);
    }
    Ok(())
}

fn double_sum(u: &PooledFeature<f64>, v: &PooledFeature<f64>) -> f64 {
    let group = u.group();
    let n = group.order() as f64;
    let mut acc = 0.0;
    for a in group.elements() {
        for b in group.elements() {
            let (x, y) = (u.transform(a), v.transform(b));
            acc += x.tensor().data().iter().zip(y.tensor().data()).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    acc / (n * n)
}

fn invariant_inner_suite(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let mut rg = rng(4);
    for kind in [GroupKind::Rot4, GroupKind::Rot4Flip] {
        let group = FiniteGroup::new(kind);
        let (mut worst, mut moved) = (0.0f64, 0);
        for _ in 0..100 {
            let c = rg.random_range(1..6);
            let u = PooledFeature::new(Tensor::randn(vec![1, group.order(), c], 1.0, &mut rg), &group)?;
            let v = PooledFeature::new(Tensor::randn(vec![1, group.order(), c], 1.0, &mut rg), &group)?;
            let fast = invariant_inner(&u, &v)?[0];
            let slow = double_sum(&u, &v);
            worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
            for h in group.elements() {
                moved += usize::from(invariant_inner(&u.transform(h), &v)?[0] != fast);
            }
        }
        r.at_most(format!("{kind}/double_sum_relative"), worst, 1e-12);
        r.exact(format!("{kind}/invariant_under_transform"), moved);
    }
    Ok(())
}

fn sinkhorn(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let scores = Tensor::<f64>::uniform(vec![64, 16], -1.0, 1.0, &mut rng(10));
    let q = sinkhorn_knopp(&scores, 100, 0.05)?;
    let plan: Vec<f64> = q.data().iter().map(|v| v / 64.0).collect();
    let row_err = plan
        .chunks(16)
        .map(|row| (row.iter().sum::<f64>() - 1.0 / 64.0).abs())
        .fold(0.0, f64::max);
    let col_err = (0..16)
        .map(|j| ((0..64).map(|i| plan[i * 16 + j]).sum::<f64>() - 1.0 / 16.0).abs())
        .fold(0.0, f64::max);
    r.at_most("converged_100_iters_marginals", row_err.max(col_err), 1e-6);

    let mut rg = rng(11);
    for iters in [1, 3, 10] {
        let mut worst = 0.0f64;
        let mut negative = 0;
        for _ in 0..20 {
            let (b, c) = (rg.random_range(2..65), rg.random_range(2..17));
            let scores = Tensor::<f64>::randn(vec![b, c], 1.0, &mut rg);
            let q = sinkhorn_knopp(&scores, iters, 0.05)?;
            negative += q.data().iter().filter(|&&v| v < 0.0).count();
            for row in q.data().chunks(c) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        r.at_most(format!("rows_sum_to_one_{iters}_iters"), worst, 1e-9);
        r.exact(format!("nonnegative_{iters}_iters"), negative);
    }
    Ok(())
}

fn state(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let mut online = ParamStore::<f64>::new();
    let w = online.add("w", randn(&[3, 2], 0));
    let mut enc = MomentumEncoder::new(&online, 0.999)?;
    let mut bad = 0;
    for step in 0..5 {
        let before = enc.params().get(w).clone();
        online.set(w, randn(&[3, 2], 1 + step))?;
        enc.update(&online)?;
        let expected = before.zip_map(online.get(w), |k, t| 0.999 * k + (1.0 - 0.999) * t)?;
        bad += usize::from(enc.params().get(w) != &expected);
    }
    r.exact("ema_update_exact", bad);

    let mut q = FeatureQueue::<f64>::new(4, 3);
    let mut pushed = Vec::new();
    let mut bad = 0;
    for step in 0..5 {
        let keys = randn::<f64>(&[3, 3], 10 + step);
        pushed.extend(keys.data().chunks(3).map(|row| {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().map(|x| x / n).collect::<Vec<_>>()
        }));
        q.push(&keys)?;
        bad += usize::from(q.len() != pushed.len().min(4));
        let newest = &pushed[pushed.len().saturating_sub(4)..];
        let held = q.keys().map(|k| k.to_vec()).unwrap_or_default();
        let unmatched = held
            .chunks(3)
            .filter(|row| !newest.iter().any(|n| max_diff(n, row) <= 1e-12))
            .count();
        bad += unmatched + usize::from(held.len() != newest.len() * 3);
    }
    r.exact("queue_fifo_bounded", bad);

    let mut log = MetricsLog::new();
    let rec = |step| StepRecord {
        step,
        loss: 1.0,
        inv_residual: None,
        lr: 0.1,
    };
    log.push(rec(0))?;
    log.push(rec(3))?;
    r.holds("metrics_rejects_repeat_step", log.push(rec(3)).is_err());
    r.holds("metrics_rejects_backward_step", log.push(rec(1)).is_err());
    r.holds("metrics_append_only", log.records().len() == 2);
    Ok(())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- data_pipeline ----

fn data_pipeline(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let data = synth_dataset::<f64>(4, 4, 24, 3)?;
    r.holds("synth_deterministic", synth_dataset::<f64>(4, 4, 24, 3)?.images() == data.images());
    let spec = AugmentationSpec {
        rot90: 0.5,
        seed: 9,
        ..AugmentationSpec::default()
    };
    let aug = Augmenter::new(spec, &[24, 16])?;
    let (mut shape_bad, mut repeat_bad) = (0, 0);
    for i in 0..data.len() {
        let img = data.image(i);
        for out in [24, 16] {
            for view in 0..2 {
                let a = aug.view(&img, i as u64, view, out)?;
                shape_bad += usize::from(a.shape() != [3, out, out]);
                repeat_bad += usize::from(a != aug.view(&img, i as u64, view, out)?);
            }
        }
    }
    r.exact("views_keep_channels_and_extent", shape_bad);
    r.exact("views_repeat_per_draw", repeat_bad);
    Ok(())
}

// ---- cli_harness ----

fn config_suite(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    let mut cfg = RunConfig {
        task: Task::Simsiam,
        equivariant_model: false,
        invariant_loss: true,
        group: GroupKind::Rot4Flip,
        ..RunConfig::default()
    };
    r.holds("invariant_loss_requires_equivariant_model", cfg.validate().is_err());
    cfg.equivariant_model = true;
    r.holds("equivariant_invariant_accepted", cfg.validate().is_ok());
    let ctx = RunConfig {
        task: Task::Context,
        group: GroupKind::Rot4Flip,
        equivariant_model: true,
        ..RunConfig::default()
    };
    r.holds("context_requires_rot4", ctx.validate().is_err());
    r.holds(
        "text_round_trip",
        RunConfig::parse(&cfg.to_text()).map(|c| c.to_text() == cfg.to_text()).unwrap_or(false),
    );
    Ok(())
}

fn tiny_run(name: &str) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        task: Task::Simsiam,
        precision: Precision::F64,
        group: GroupKind::Rot4,
        equivariant_model: true,
        invariant_loss: true,
        widths: vec![4, 4],
        pool_after: vec![true, false],
        stem_pool: 1,
        proj_hidden: 8,
        proj_out: 8,
        pred_hidden: 4,
        epochs: 2,
        batch_size: 4,
        residual_every: 2,
        residual_batch: 4,
        data: DataSource::Synth {
            classes: 2,
            per_class: 6,
            extent: 16,
            seed: 5,
        },
        ..RunConfig::default()
    }
}

fn reproducibility(r: &mut Recorder, o: &VerifyOptions) -> Result<()> {
    let cfg = tiny_run("repro");
    let dirs = [o.scratch.join("repro_a"), o.scratch.join("repro_b")];
    let runs = dirs
        .iter()
        .map(|d| pretrain(&cfg, d))
        .collect::<Result<Vec<_>>>()?;
    let csv = |d: &PathBuf| std::fs::read(d.join("metrics.csv"));
    r.holds("metrics_csv_identical", csv(&dirs[0])? == csv(&dirs[1])?);
    let params = |d: &PathBuf| Checkpoint::<f64>::load(&d.join("checkpoint")).map(|c| c.params);
    r.holds("checkpoint_bit_identical", params(&dirs[0])?.bit_equal(&params(&dirs[1])?));
    r.holds(
        "epoch_losses_identical",
        runs[0].epoch_losses.iter().map(|v| v.to_bits()).eq(runs[1].epoch_losses.iter().map(|v| v.to_bits())),
    );
    let resid = runs[0].log.max_residual().unwrap_or(f64::INFINITY);
    r.at_most("tiny_invariant_run_residual", resid, 1e-8);
    for d in &dirs {
        std::fs::remove_dir_all(d).ok();
    }
    Ok(())
}

fn coverage(r: &mut Recorder, _: &VerifyOptions) -> Result<()> {
    r.exact("every_invariant_has_a_suite", coverage_gaps().len());
    let names: HashSet<&str> = suite_names().into_iter().collect();
    let dangling = MANIFEST.iter().filter(|(s, _)| !names.contains(s)).count();
    r.exact("manifest_names_real_suites", dangling);
    let unknown = MANIFEST
        .iter()
        .flat_map(|(_, inv)| inv.iter())
        .filter(|i| !INVARIANTS.contains(i))
        .count();
    r.exact("manifest_lists_known_invariants", unknown);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_covers_every_invariant() {
        assert!(coverage_gaps().is_empty(), "{:?}", coverage_gaps());
        for name in suite_names() {
            assert!(MANIFEST.iter().any(|(s, _)| *s == name), "{name} missing from manifest");
        }
    }

    #[test]
    fn profile_selects_thresholds() {
        assert_eq!(profile_tolerance(Precision::F64), 1e-8);
        assert_eq!(profile_tolerance(Precision::F32), 1e-4);
    }

    #[test]
    fn corrupted_table_fails_axiom_suite() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = VerifyOptions::new(Precision::F64, dir.path());
        opts.only = vec!["group_axioms".into()];
        assert!(run_verify(&opts).unwrap().passed());
        opts.corrupt_cayley = true;
        let report = run_verify(&opts).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures()[0].check, "rot4_corrupted/cayley");
    }

    #[test]
    fn unknown_suite_is_rejected() {
        let mut opts = VerifyOptions::new(Precision::F64, ".");
        opts.only = vec!["nope".into()];
        assert!(run_verify(&opts).is_err());
    }
}
