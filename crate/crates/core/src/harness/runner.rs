//! Runs experiments and writes their result files.
//!
//! A run directory holds:
//! - `metrics.csv`: `round,split,group,ctc_loss,ter,wer,comm_params,comm_embed_scalars`
//! - `segments.csv`: per test utterance scores from the final evaluation
//! - `summary.json`: final metrics and counters
//! - `manifest.json`: config, seed and crate version
//! - `model.frsm`: final global checkpoint

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{run_experiment, CommCounters, ExperimentOutcome, ExperimentSetup};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{GroupMetrics, Segment};
use crate::synthdata::Corpus;

pub const METRICS_HEADER: &str =
    "round,split,group,ctc_loss,ter,wer,comm_params,comm_embed_scalars";
pub const SEGMENTS_HEADER: &str =
    "index,client,severity,ctc_loss,token_edits,ref_tokens,word_edits,ref_words";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rounds: usize,
    pub total_steps: usize,
    pub comm: CommCounters,
    pub final_metrics: Vec<GroupMetrics>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
}

pub fn metrics_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for rec in &outcome.history {
        let Some(eval) = &rec.eval else { continue };
        for g in &eval.groups {
            let _ = writeln!(
                out,
                "{},test,{},{},{},{},{},{}",
                rec.round,
                g.group,
                g.ctc_loss,
                g.ter,
                g.wer,
                rec.comm.param_scalars,
                rec.comm.embed_scalars
            );
        }
    }
    out
}

pub fn segments_csv(segments: &[Segment]) -> String {
    let mut out = String::from(SEGMENTS_HEADER);
    out.push('\n');
    for (i, s) in segments.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            s.client,
            s.severity.map(|v| v.to_string()).unwrap_or_default(),
            s.ctc_loss.map(|v| v.to_string()).unwrap_or_default(),
            s.token_edits,
            s.ref_tokens,
            s.word_edits,
            s.ref_words
        );
    }
    out
}

/// Word errors per segment from a `segments.csv` file.
pub fn read_segment_errors(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SEGMENTS_HEADER => {}
        _ => {
            return Err(Error::Data(format!(
                "{} is not a segments file",
                path.display()
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(6)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("malformed segment row {l:?}")))
        })
        .collect()
}

/// Runs one seed of `cfg` on `corpus` and writes the run directory.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    setup: &ExperimentSetup,
    corpus: &Corpus,
    seed: u64,
    dir: &Path,
) -> Result<(ExperimentOutcome, RunSummary)> {
    let outcome = run_experiment(corpus, setup, seed)?;
    let final_eval = outcome
        .final_eval()
        .ok_or_else(|| Error::Data("run produced no evaluation".into()))?;
    let summary = RunSummary {
        seed,
        rounds: outcome.history.len(),
        total_steps: outcome.total_steps,
        comm: outcome.comm,
        final_metrics: final_eval.groups.clone(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome))?;
    fs::write(dir.join("segments.csv"), segments_csv(&final_eval.segments))?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let f = fs::File::create(dir.join("model.frsm"))?;
    outcome.final_params.save(BufWriter::new(f))?;
    Ok((outcome, summary))
}

/// Runs every seed of `cfg`, one directory per seed.
pub fn run_config(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, RunSummary)>> {
    cfg.validate()?;
    let corpus = cfg.corpus()?;
    let setup = cfg.setup();
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.output_dir.join(format!("seed-{seed}"));
        let (_, summary) = run_to_dir(cfg, &setup, &corpus, seed, &dir)?;
        out.push((dir, summary));
    }
    Ok(out)
}
