use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use equivar_cli::config::{Precision, RunConfig};
use equivar_cli::probe::probe_run;
use equivar_cli::report::{build_report, write_report};
use equivar_cli::train::pretrain;
use equivar_cli::verify::{run_verify, VerifyOptions};
use equivar_core::group::{FiniteGroup, GroupKind};
use equivar_core::pretext::generate_closed_subset;

#[derive(Parser)]
#[command(name = "equivar", about = "Equivariant self-supervised learning toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the property suites; exits nonzero if any check fails.
    Verify {
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Directory for verify.csv and scratch runs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated group kinds.
        #[arg(long, value_delimiter = ',', default_value = "rot4,rot2_flip,rot4_flip")]
        groups: Vec<GroupKind>,
        /// Run only these suites.
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Negative control: check a group with a damaged Cayley table.
        #[arg(long)]
        corrupt_cayley: bool,
    },
    /// Generate a jigsaw permutation subset closed under the group.
    GenJigsaw {
        /// Take orbits, seed and group from a config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 250)]
        orbits: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "rot4_flip")]
        group: GroupKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on the frozen backbone of a finished run.
    Probe {
        /// Run directory written by `pretrain`.
        #[arg(long)]
        out: PathBuf,
        /// Labeled dataset stem or PPM directory; defaults to the run's data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Comparison table across runs of one task.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Verify {
            precision,
            out,
            groups,
            suites,
            corrupt_cayley,
        } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let opts = VerifyOptions {
                precision,
                groups,
                corrupt_cayley,
                only: suites,
                scratch: out.clone(),
            };
            let report = run_verify(&opts)?;
            print!("{}", report.render());
            let csv = out.join("verify.csv");
            report.write_csv(&csv)?;
            println!("wrote {}", csv.display());
            if !report.passed() {
                let ids: Vec<String> = report.failures().iter().map(|c| format!("{}/{}", c.suite, c.check)).collect();
                bail!("failed checks: {}", ids.join(", "));
            }
        }
        Cmd::GenJigsaw {
            config,
            orbits,
            seed,
            group,
            out,
        } => {
            let (orbits, seed, group) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    (cfg.orbits, seed.unwrap_or(cfg.subset_seed), cfg.group)
                }
                None => (orbits, seed.unwrap_or(0), group),
            };
            let subset = generate_closed_subset(&FiniteGroup::new(group), orbits, seed)?;
            let mut buf = Vec::new();
            subset.write(&mut buf)?;
            std::fs::write(&out, buf).with_context(|| format!("writing {}", out.display()))?;
            println!("permutations={}", subset.len());
            println!("min_hamming={}", subset.min_hamming());
        }
        Cmd::Pretrain {
            config,
            seed,
            precision,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            let o = pretrain(&cfg, &out)?;
            for (k, v) in &o.summary.0 {
                println!("{k}={v}");
            }
        }
        Cmd::Probe { out, data } => {
            let r = probe_run(&out, data.as_deref())?;
            println!("probe_train_top1={}", r.train_top1);
            println!("probe_top1={}", r.test_top1);
        }
        Cmd::Report { runs, out } => {
            let report = build_report(&runs)?;
            write_report(&report, &out)?;
            print!("{}", report.csv);
            println!("ranking by probe_top1: {}", report.ranking.join(" > "));
        }
    }
    Ok(())
}
