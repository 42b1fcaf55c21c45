//! Greedy CTC decoding and error rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ctc_loss_value, LabelSeq, BLANK};
use crate::model::{forward, ModelParams};
use crate::numerics::Tensor;
use crate::synthdata::{Severity, Utterance, WORD_SEP};

/// Per-frame argmax, collapse repeats, drop blanks. May return an empty sequence.
pub fn greedy_ctc_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.rows() {
        let row = log_probs.row_slice(r);
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            )
            .0;
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over reference length. Rejects an empty reference.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data(
            "error rate is undefined for an empty reference".into(),
        ));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Splits a token sequence into words at [`WORD_SEP`], dropping empty words.
pub fn words(tokens: &[usize]) -> Vec<&[usize]> {
    tokens
        .split(|&t| t == WORD_SEP)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Scoring of one test utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub client: usize,
    pub severity: Option<Severity>,
    pub ctc_loss: Option<f64>,
    pub token_edits: usize,
    pub ref_tokens: usize,
    pub word_edits: usize,
    pub ref_words: usize,
}

/// Micro-averaged metrics over a group of segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub utterances: usize,
    pub infeasible: usize,
    /// Mean over feasible utterances.
    pub ctc_loss: f64,
    pub ter: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// `all` first, then one group per severity present.
    pub groups: Vec<GroupMetrics>,
    pub segments: Vec<Segment>,
}

impl Evaluation {
    pub fn overall(&self) -> &GroupMetrics {
        &self.groups[0]
    }
}

fn summarize(group: String, segs: &[&Segment]) -> GroupMetrics {
    let losses: Vec<f64> = segs.iter().filter_map(|s| s.ctc_loss).collect();
    let sum = |f: fn(&Segment) -> usize| segs.iter().map(|s| f(s)).sum::<usize>() as f64;
    GroupMetrics {
        group,
        utterances: segs.len(),
        infeasible: segs.len() - losses.len(),
        ctc_loss: if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        },
        ter: sum(|s| s.token_edits) / sum(|s| s.ref_tokens).max(1.0),
        wer: sum(|s| s.word_edits) / sum(|s| s.ref_words).max(1.0),
    }
}

pub fn score_utterance(params: &ModelParams, u: &Utterance) -> Result<Segment> {
    let trace = forward(params, &u.features, &[])?;
    let hyp = greedy_ctc_decode(&trace.log_probs);
    let ctc_loss = match ctc_loss_value(&trace.log_probs, &u.labels) {
        Ok(v) => Some(v),
        Err(Error::InfeasibleSample { .. }) => None,
        Err(e) => return Err(e),
    };
    let reference: &LabelSeq = &u.labels;
    let (rw, hw) = (words(reference.tokens()), words(&hyp));
    Ok(Segment {
        client: u.client,
        severity: u.severity,
        ctc_loss,
        token_edits: edit_distance(reference.tokens(), &hyp),
        ref_tokens: reference.len(),
        word_edits: edit_distance(&rw, &hw),
        ref_words: rw.len(),
    })
}

/// Scores every test utterance; groups by severity when tags are present.
pub fn evaluate(params: &ModelParams, test: &[Utterance]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let segments = test
        .iter()
        .map(|u| score_utterance(params, u))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&Segment> = segments.iter().collect();
    let mut groups = vec![summarize("all".into(), &all)];
    let mut by_severity: BTreeMap<Severity, Vec<&Segment>> = BTreeMap::new();
    for s in &segments {
        if let Some(sev) = s.severity {
            by_severity.entry(sev).or_default().push(s);
        }
    }
    for (sev, segs) in by_severity {
        groups.push(summarize(sev.to_string(), &segs));
    }
    Ok(Evaluation { groups, segments })
}
