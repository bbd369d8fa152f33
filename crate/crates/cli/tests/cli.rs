use std::path::Path;
use std::process::{Command, Output};

use equivar_cli::config::{ConfigError, RunConfig};
use equivar_cli::metrics::{MetricsLog, Summary, METRICS_HEADER};
use equivar_cli::report::build_report;
use equivar_core::nn::Checkpoint;

fn equivar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equivar"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .env_remove("RUST_LIB_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
run.name=tiny
run.task=simsiam
run.precision=f64
model.group=rot4
model.equivariant_model=true
model.widths=4,4
model.pool_after=true,false
model.stem_pool=1
model.proj_hidden=8
model.proj_out=8
model.pred_hidden=4
loss.invariant_loss=true
train.epochs=2
train.batch_size=4
train.residual_every=2
train.residual_batch=4
data.synth=2,8,16
data.seed=1
probe.epochs=5
probe.batch_size=4
";

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn invariant_loss_without_equivariant_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("model.equivariant_model=true", "model.equivariant_model=false");
    match RunConfig::parse(&text).and_then(|c| c.validate().map(|_| c)) {
        Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "loss.invariant_loss"),
        other => panic!("expected a validation error, got {other:?}"),
    }
    let cfg = write_config(dir.path(), "bad.txt", &text);
    let out = dir.path().join("run");
    let o = equivar(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss.invariant_loss"));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn context_with_flip_group_is_rejected() {
    let text = TINY
        .replace("run.task=simsiam", "run.task=context")
        .replace("model.group=rot4", "model.group=rot4_flip");
    match RunConfig::parse(&text).and_then(|c| c.validate().map(|_| c)) {
        Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "model.group"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn gen_jigsaw_writes_2000_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let o = equivar(&["gen-jigsaw", "--orbits", "250", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("min_hamming="));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert!(text.starts_with("group=rot4_flip orbits=250 seed=7 "));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = equivar(&["verify", "--out", out, "--suite", "group_axioms", "--suite", "sinkhorn"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    let csv = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert!(csv.starts_with("suite,check,status,value,tolerance\n"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",pass,")));

    let bad = equivar(&["verify", "--out", out, "--suite", "group_axioms", "--corrupt-cayley"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("group_axioms/rot4_corrupted/cayley"));
    assert!(stdout(&bad).contains("FAIL group_axioms"));
}

#[test]
fn full_verify_passes_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let o = equivar(&["verify", "--precision", "f64", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed, precision f64"));
}

#[test]
fn pretrain_probe_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.txt", TINY);
    let run = dir.path().join("tiny");
    let o = equivar(&["pretrain", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let header = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRICS_HEADER);
    let log = MetricsLog::read_csv(&run.join("metrics.csv")).unwrap();
    assert_eq!(log.records().len(), 2 * 3);
    assert!(log.max_residual().unwrap() <= 1e-8);

    let before = Checkpoint::<f64>::load(&run.join("checkpoint")).unwrap();
    let bytes_before = std::fs::read(run.join("checkpoint/params.eqt")).unwrap();
    let o = equivar(&["probe", "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after = Checkpoint::<f64>::load(&run.join("checkpoint")).unwrap();
    assert!(before.params.bit_equal(&after.params));
    assert_eq!(bytes_before, std::fs::read(run.join("checkpoint/params.eqt")).unwrap());
    let summary = Summary::read(&run.join("summary.txt")).unwrap();
    let top1 = summary.get_f64("probe_top1").unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(std::fs::read_to_string(run.join("probe.csv")).unwrap().lines().count(), 6);

    let table = dir.path().join("table.csv");
    let o = equivar(&["report", run.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("metric,tiny\n"));
    assert!(csv.contains("arm,equivariant+invariant"));
}

#[test]
fn report_rejects_mixed_tasks() {
    let dir = tempfile::tempdir().unwrap();
    for (name, task) in [("a", "moco"), ("b", "swav")] {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        let mut s = Summary::default();
        s.set("name", name);
        s.set("task", task);
        s.write(&d.join("summary.txt")).unwrap();
    }
    let err = build_report(&[dir.path().join("a"), dir.path().join("b")]).unwrap_err();
    assert!(err.to_string().contains("mismatched tasks"));
}

#[test]
fn f64_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.txt", TINY);
    let runs: Vec<_> = ["r1", "r2"].iter().map(|n| dir.path().join(n)).collect();
    for r in &runs {
        let o = equivar(&["pretrain", "--config", &cfg, "--seed", "11", "--out", r.to_str().unwrap()]);
        assert!(o.status.success());
    }
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read(&runs[0], "metrics.csv"), read(&runs[1], "metrics.csv"));
    assert_eq!(read(&runs[0], "checkpoint/params.eqt"), read(&runs[1], "checkpoint/params.eqt"));
    let other = dir.path().join("r3");
    let o = equivar(&["pretrain", "--config", &cfg, "--seed", "12", "--out", other.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(read(&runs[0], "metrics.csv"), read(&other, "metrics.csv"));
}
