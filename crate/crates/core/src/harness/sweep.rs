//! Experiment grids over communication frequency, regularizer and tap position.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::federation::{CommSchedule, LocalSteps, TrainingMode};
use crate::harness::config::ExperimentConfig;
use crate::harness::runner::run_to_dir;
use crate::regularizers::RegConfig;

pub const SWEEP_HEADER: &str =
    "axis,value,seed,rounds,steps_per_round,total_steps,ctc_loss,ter,wer,comm_params,comm_embed_scalars";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    CommFrequency,
    RegMethod,
    TapPosition,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comm-frequency" => Ok(Self::CommFrequency),
            "reg-method" => Ok(Self::RegMethod),
            "tap-position" => Ok(Self::TapPosition),
            other => Err(config_err(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::CommFrequency => "comm-frequency",
            Self::RegMethod => "reg-method",
            Self::TapPosition => "tap-position",
        }
    }
}

/// One grid cell: a label and the config it runs.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub total_steps: usize,
    pub ctc_loss: f64,
    pub ter: f64,
    pub wer: f64,
    pub comm_params: u64,
    pub comm_embed_scalars: u64,
}

/// Largest divisor of `n` not above `cap`.
fn divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.max(1))
        .rev()
        .find(|d| n.is_multiple_of(*d))
        .unwrap_or(1)
}

/// Expands `base` along `axis`.
///
/// For communication frequency the base schedule's round count is read as
/// an epoch budget for the largest client; every cell spends exactly that
/// many of its steps. A centralized cell trains the pooled data for the
/// same number of epochs.
pub fn cells(
    base: &ExperimentConfig,
    axis: SweepAxis,
    batches_per_epoch: usize,
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    match axis {
        SweepAxis::CommFrequency => {
            let epochs = base.schedule.total_rounds;
            let budget = epochs * batches_per_epoch;
            let quarter = divisor_at_most(budget, batches_per_epoch / 4);
            let mut ks = vec![1, quarter];
            ks.dedup();
            for k in ks {
                let mut c = base.clone();
                c.centralized = false;
                c.schedule = CommSchedule::every_batches(k, epochs, batches_per_epoch)?;
                out.push(SweepCell {
                    value: format!("{k}-batch"),
                    config: c,
                });
            }
            let mut c = base.clone();
            c.centralized = false;
            c.schedule = CommSchedule {
                local_steps: LocalSteps::Epoch,
                total_rounds: epochs,
                ..base.schedule.clone()
            };
            out.push(SweepCell {
                value: "1-epoch".into(),
                config: c.clone(),
            });
            c.centralized = true;
            c.reg = RegConfig::none();
            out.push(SweepCell {
                value: "centralized".into(),
                config: c,
            });
        }
        SweepAxis::RegMethod => {
            let b = &base.reg;
            let methods = [
                ("none", RegConfig::none()),
                (
                    "para",
                    RegConfig {
                        enable_para: true,
                        ..b.clone()
                    }
                    .only(true, false, false),
                ),
                (
                    "embed",
                    RegConfig {
                        enable_embed: true,
                        ..b.clone()
                    }
                    .only(false, true, false),
                ),
                (
                    "loss",
                    RegConfig {
                        enable_loss: true,
                        ..b.clone()
                    }
                    .only(false, false, true),
                ),
                (
                    "combined",
                    RegConfig {
                        combined_preset: true,
                        ..b.clone()
                    }
                    .only(true, true, true),
                ),
            ];
            for (name, reg) in methods {
                let mut c = base.clone();
                c.reg = reg;
                out.push(SweepCell {
                    value: name.into(),
                    config: c,
                });
            }
        }
        SweepAxis::TapPosition => {
            let taps = base.model.tap_positions.clone();
            let mut sets: Vec<Vec<usize>> = taps.iter().map(|&t| vec![t]).collect();
            if taps.len() > 1 {
                sets.push(taps.clone());
            }
            for set in sets {
                let mut c = base.clone();
                c.reg = RegConfig {
                    enable_loss: true,
                    loss_taps: set.clone(),
                    ..base.reg.clone()
                }
                .only(false, false, true);
                let label = set
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                out.push(SweepCell {
                    value: format!("loss@{label}"),
                    config: c,
                });
            }
        }
    }
    Ok(out)
}

impl RegConfig {
    fn only(mut self, para: bool, embed: bool, loss: bool) -> Self {
        self.enable_para = para;
        self.enable_embed = embed;
        self.enable_loss = loss;
        self
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.seed,
            r.rounds,
            r.steps_per_round,
            r.total_steps,
            r.ctc_loss,
            r.ter,
            r.wer,
            r.comm_params,
            r.comm_embed_scalars
        );
    }
    out
}

/// Runs every cell for every seed; writes per-cell run directories and `sweep.csv`.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let corpus = base.corpus()?;
    let nb = corpus
        .clients
        .iter()
        .map(|c| base.train.batches_per_epoch(c.train.len()))
        .max()
        .unwrap_or(0);
    let pooled_nb = base.train.batches_per_epoch(corpus.train_size());
    let mut rows = Vec::new();
    for cell in cells(base, axis, nb)? {
        cell.config.validate()?;
        let setup = cell.config.setup();
        let steps_per_round = match setup.mode {
            TrainingMode::Centralized => cell.config.schedule.steps_per_round(pooled_nb),
            TrainingMode::Federated => cell.config.schedule.steps_per_round(nb),
        };
        for &seed in &base.seeds {
            let dir = base
                .output_dir
                .join(axis.name())
                .join(&cell.value)
                .join(format!("seed-{seed}"));
            let (outcome, summary) = run_to_dir(&cell.config, &setup, &corpus, seed, &dir)?;
            let overall = &summary.final_metrics[0];
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: cell.value.clone(),
                seed,
                rounds: summary.rounds,
                steps_per_round,
                total_steps: outcome.total_steps,
                ctc_loss: overall.ctc_loss,
                ter: overall.ter,
                wer: overall.wer,
                comm_params: summary.comm.param_scalars,
                comm_embed_scalars: summary.comm.embed_scalars,
            });
        }
    }
    fs::create_dir_all(&base.output_dir)?;
    fs::write(
        base.output_dir.join(format!("sweep-{}.csv", axis.name())),
        sweep_csv(&rows),
    )?;
    Ok(rows)
}
