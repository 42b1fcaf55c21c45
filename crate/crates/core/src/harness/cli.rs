//! Command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{config_err, Result};
use crate::harness::checks::run_checks;
use crate::harness::config::ExperimentConfig;
use crate::harness::runner::{read_segment_errors, run_config};
use crate::harness::significance::mapsswe_test;
use crate::harness::sweep::{run_sweep, SweepAxis};
use crate::synthdata::{generate_scenario, partition_stats, ScenarioConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fedreg",
    version,
    about = "Federated CTC training with regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSON lines.
    Generate {
        /// Scenario JSON; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `dysarthric` or `elderly`.
        #[arg(long, default_value = "dysarthric")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a grid along one axis: comm-frequency, reg-method or tap-position.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Check {
        /// Fewer cases.
        #[arg(long)]
        quick: bool,
    },
    /// Matched-pairs test between two runs' segments.csv files.
    Compare { a: PathBuf, b: PathBuf },
}

/// Executes a parsed command; returns whether it succeeded.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            config,
            preset,
            seed,
            out,
        } => {
            let mut scenario = match config {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
                None => match preset.as_str() {
                    "dysarthric" => ScenarioConfig::dysarthric_like(),
                    "elderly" => ScenarioConfig::elderly_like(),
                    other => return Err(config_err(format!("unknown preset {other:?}"))),
                },
            };
            if let Some(s) = seed {
                scenario.seed = s;
            }
            let corpus = generate_scenario(&scenario)?;
            crate::synthdata::write_corpus(&corpus, BufWriter::new(File::create(&out)?))?;
            let stats = partition_stats(&corpus.clients, scenario.vocab_size);
            println!(
                "wrote {} train and {} test utterances for {} clients to {}",
                corpus.train_size(),
                corpus.test.len(),
                corpus.clients.len(),
                out.display()
            );
            println!("mean label entropy {:.4}", stats.mean_entropy());
            Ok(true)
        }
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            for (dir, summary) in run_config(&cfg)? {
                let m = &summary.final_metrics[0];
                println!(
                    "seed {}: wer {:.4} ter {:.4} ctc {:.4} -> {}",
                    summary.seed,
                    m.wer,
                    m.ter,
                    m.ctc_loss,
                    dir.display()
                );
            }
            Ok(true)
        }
        Command::Sweep { config, axis, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            for r in run_sweep(&cfg, axis)? {
                println!(
                    "{} seed {}: wer {:.4} ctc {:.4}",
                    r.value, r.seed, r.wer, r.ctc_loss
                );
            }
            Ok(true)
        }
        Command::Check { quick } => {
            let reports = run_checks(quick)?;
            for r in &reports {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            Ok(reports.iter().all(|r| r.passed))
        }
        Command::Compare { a, b } => {
            let ea = read_segment_errors(&a)?;
            let eb = read_segment_errors(&b)?;
            let res = mapsswe_test(&ea, &eb)?;
            println!("{}", serde_json::to_string_pretty(&res)?);
            Ok(true)
        }
    }
}
