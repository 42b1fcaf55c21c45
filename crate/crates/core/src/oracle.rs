//! Independent reference computations used by the test suites and `check`.
//!
//! Nothing here goes through the training code paths it is used to verify:
//! CTC by exhaustive path enumeration, edit distance by plain recursion,
//! gradients by central differences, and FedAvg by one centralized graph.

use crate::error::Result;
use crate::losses::{ctc_loss, BLANK};
use crate::model::{forward_graph, ModelParams};
use crate::numerics::{Graph, Tensor};
use crate::synthdata::Utterance;

/// CTC collapse: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// `-log Σ P(path)` over all `vocab^frames` paths collapsing to `labels`.
pub fn brute_force_ctc(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.get(t, k))
                .sum();
            total += lp.exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Edit distance by direct recursion (exponential; short inputs only).
pub fn brute_force_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_force_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_force_edit_distance(ra, b) + 1;
            let ins = brute_force_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Central difference of `f` along coordinate `i` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// True when the analytic and numeric values agree at relative error
/// `rel` or absolute error `abs`.
pub fn gradients_agree(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

/// One SGD step on `Σᵢ wᵢ · mean CTC over shard i`, as a single graph.
pub fn centralized_weighted_step(
    params: &ModelParams,
    shards: &[(&[Utterance], f64)],
    lr: f64,
) -> Result<ModelParams> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let mut weighted = Vec::new();
    for (data, w) in shards {
        let mut terms = Vec::new();
        for u in *data {
            let x = g.constant(u.features.clone());
            let tr = forward_graph(&mut g, &bound, x, &[])?;
            terms.push(ctc_loss(&mut g, tr.log_probs, &u.labels)?);
        }
        let s = g.add_scalars(&terms);
        weighted.push(g.scale(s, w / data.len() as f64));
    }
    let total = g.add_scalars(&weighted);
    let grads = g.backward(total)?;
    let mut next = params.clone();
    let mut flat = Vec::with_capacity(params.len());
    for v in bound.vars() {
        grads.extend_into(*v, &mut flat);
    }
    for (w, d) in next.flat_mut().iter_mut().zip(flat) {
        *w -= lr * d;
    }
    Ok(next)
}
