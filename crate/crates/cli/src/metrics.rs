//! Per-step metrics CSV and the per-run summary file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const METRICS_HEADER: &str = "step,loss,inv_residual,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Present only on steps where the residual was measured.
    pub inv_residual: Option<f64>,
    pub lr: f64,
}

/// Append-only step log with strictly increasing step indices, plus probe
/// accuracies per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
    probe: Vec<(usize, f64)>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                bail!("metrics step {} after {}", r.step, last.step);
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn push_probe(&mut self, epoch: usize, accuracy: f64) -> Result<()> {
        if self.probe.last().is_some_and(|&(e, _)| epoch <= e) {
            bail!("probe epoch {epoch} out of order");
        }
        self.probe.push((epoch, accuracy));
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn probe(&self) -> &[(usize, f64)] {
        &self.probe
    }

    pub fn max_residual(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.inv_residual)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(METRICS_HEADER.split(','))?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:e}", r.loss),
                r.inv_residual.map(|v| format!("{v:e}")).unwrap_or_default(),
                format!("{:e}", r.lr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != METRICS_HEADER {
            bail!("{}: header {:?}, expected {METRICS_HEADER}", path.display(), header.join(","));
        }
        let mut log = Self::new();
        for rec in r.records() {
            let rec = rec?;
            let res = rec.get(2).unwrap_or("");
            log.push(StepRecord {
                step: rec[0].parse()?,
                loss: rec[1].parse()?,
                inv_residual: if res.is_empty() { None } else { Some(res.parse()?) },
                lr: rec[3].parse()?,
            })?;
        }
        Ok(log)
    }

    pub fn write_probe_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "top1"])?;
        for (e, a) in &self.probe {
            w.write_record([e.to_string(), format!("{a}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Flat `key=value` file summarizing one run; the report reads these.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary(pub BTreeMap<String, String>);

impl Summary {
    pub fn set(&mut self, k: &str, v: impl ToString) {
        self.0.insert(k.to_string(), v.to_string());
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    pub fn get_f64(&self, k: &str) -> Option<f64> {
        self.get(k).and_then(|v| v.parse().ok())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}: bad line {line:?}", path.display()))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }
}
