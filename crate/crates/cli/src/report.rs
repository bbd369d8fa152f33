//! Three-arm comparison table from finished runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::metrics::Summary;

const ROWS: [&str; 7] = [
    "arm",
    "group",
    "probe_top1",
    "loss_first_epoch",
    "loss_last_epoch",
    "loss_drop",
    "max_inv_residual",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub task: String,
    /// Run names in column order.
    pub columns: Vec<String>,
    pub csv: String,
    /// Column names sorted by descending probe accuracy (runs without a
    /// probe result last).
    pub ranking: Vec<String>,
}

/// Builds the table from run directories (each holding `summary.txt`).
/// Columns are ordered by run name.
pub fn build_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        bail!("report needs at least one run");
    }
    let mut runs: Vec<Summary> = run_dirs
        .iter()
        .map(|d| Summary::read(&d.join("summary.txt")))
        .collect::<Result<_>>()?;
    let task = runs[0].get("task").unwrap_or("").to_string();
    for (d, s) in run_dirs.iter().zip(&runs) {
        let t = s.get("task").unwrap_or("");
        if t != task {
            bail!("mismatched tasks: {} is {t:?}, expected {task:?}", d.display());
        }
    }
    runs.sort_by(|a, b| a.get("name").cmp(&b.get("name")));
    let columns: Vec<String> = runs.iter().map(|s| s.get("name").unwrap_or("?").to_string()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for row in ROWS {
        let mut rec = vec![row.to_string()];
        rec.extend(runs.iter().map(|s| s.get(row).unwrap_or("NA").to_string()));
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner()?)?;
    let mut ranked: Vec<(Option<f64>, String)> = runs
        .iter()
        .zip(&columns)
        .map(|(s, c)| (s.get_f64("probe_top1"), c.clone()))
        .collect();
    ranked.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.1.cmp(&b.1)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    Ok(Report {
        task,
        columns,
        csv,
        ranking: ranked.into_iter().map(|(_, c)| c).collect(),
    })
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, &report.csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(dir: &Path, name: &str, task: &str, top1: Option<f64>) -> PathBuf {
        let d = dir.join(name);
        std::fs::create_dir_all(&d).unwrap();
        let mut s = Summary::default();
        s.set("name", name);
        s.set("task", task);
        s.set("arm", "baseline");
        if let Some(a) = top1 {
            s.set("probe_top1", a);
        }
        s.write(&d.join("summary.txt")).unwrap();
        d
    }

    #[test]
    fn one_and_three_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(dir.path(), "moco-eqonly", "moco", Some(0.5));
        let b = run(dir.path(), "moco-baseline", "moco", Some(0.7));
        let c = run(dir.path(), "moco-eqinv", "moco", None);
        let one = build_report(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.csv.lines().next().unwrap(), "metric,moco-eqonly");
        let three = build_report(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(three.columns, ["moco-baseline", "moco-eqinv", "moco-eqonly"]);
        assert_eq!(three.csv.lines().count(), 1 + ROWS.len());
        assert_eq!(three.ranking, ["moco-baseline", "moco-eqonly", "moco-eqinv"]);
        // input order does not matter
        assert_eq!(build_report(&[c, b, a]).unwrap(), three);
    }

    #[test]
    fn mixed_tasks_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(dir.path(), "x", "moco", None);
        let b = run(dir.path(), "y", "swav", None);
        let err = build_report(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("mismatched tasks"));
    }
}
