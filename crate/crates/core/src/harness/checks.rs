//! Oracle suites behind the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::federation::{CommSchedule, Federation, LocalSteps, TrainConfig};
use crate::harness::metrics::edit_distance;
use crate::losses::{ctc_loss_value, LabelSeq};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{log_softmax_rows, Graph, Tensor};
use crate::oracle::{
    brute_force_ctc, brute_force_edit_distance, central_difference, centralized_weighted_step,
    gradients_agree,
};
use crate::regularizers::{local_objective, EmbeddingReference, GlobalView, RegConfig};
use crate::synthdata::{client_weights, ClientShard, Utterance};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;
pub const CTC_TOL: f64 = 1e-10;
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0, 1.0).expect("valid");
    Tensor::from_rows(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng)).collect(),
    )
}

/// Random normalized log-probabilities `frames × vocab`.
pub fn random_log_probs(frames: usize, vocab: usize, rng: &mut impl Rng) -> Tensor {
    log_softmax_rows(&normal_tensor(frames, vocab, rng).map(|v| 1.5 * v))
}

/// Random CTC-feasible labels for `frames` frames over `1..vocab`.
pub fn random_labels(max_len: usize, frames: usize, vocab: usize, rng: &mut impl Rng) -> LabelSeq {
    loop {
        let len = rng.gen_range(1..=max_len);
        let l =
            LabelSeq::new((0..len).map(|_| rng.gen_range(1..vocab)).collect()).expect("non-empty");
        if l.is_feasible(frames) {
            return l;
        }
    }
}

/// Worst DP-vs-enumeration gap over `cases` random instances (T≤6, U≤3, V≤4).
pub fn ctc_oracle_gap(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=4);
        let lp = random_log_probs(frames, vocab, &mut rng);
        let labels = random_labels(3.min(frames), frames, vocab, &mut rng);
        let dp = ctc_loss_value(&lp, &labels)?;
        let bf = brute_force_ctc(&lp, labels.tokens());
        worst = worst.max((dp - bf).abs());
    }
    Ok(worst)
}

/// Pairs where the DP edit distance disagrees with recursion, over every
/// pair of sequences up to `max_len` over a 3-symbol alphabet.
pub fn edit_distance_mismatches(max_len: usize) -> usize {
    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    let mut bad = 0;
    for a in &seqs {
        for b in &seqs {
            if edit_distance(a, b) != brute_force_edit_distance(a, b) {
                bad += 1;
            }
        }
    }
    bad
}

/// Model used by the gradient suite: 2 blocks, d_model 8.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 5,
        input_dim: 6,
        tap_positions: vec![1, 2],
    }
}

/// Random utterance with feasible labels.
pub fn random_utterance(cfg: &ModelConfig, rng: &mut impl Rng) -> Utterance {
    let frames = rng.gen_range(4..=6);
    Utterance {
        client: 0,
        features: normal_tensor(frames, cfg.input_dim, rng),
        labels: random_labels(2, frames, cfg.vocab_size, rng),
        severity: None,
    }
}

fn perturbed(p: &ModelParams, scale: f64, rng: &mut impl Rng) -> ModelParams {
    let n = Normal::new(0.0, scale).expect("valid");
    let mut q = p.clone();
    q.flat_mut().iter_mut().for_each(|v| *v += n.sample(rng));
    q
}

/// Objective terms checked by the gradient suite.
pub const GRADIENT_TERMS: [&str; 5] = ["ctc", "r_para", "r_embed", "r_loss", "combined"];

/// Result of one gradient-check case.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub checked: usize,
    /// Per term, derivatives whose magnitude exceeds the absolute tolerance.
    pub nonzero: [usize; 5],
    /// `(term, coordinate, analytic, numeric)` for each disagreement.
    pub failures: Vec<(&'static str, usize, f64, f64)>,
}

/// Checks autodiff against central differences for every term of the
/// local objective on `coords` random coordinates.
pub fn gradient_case(seed: u64, coords: usize) -> Result<GradientCase> {
    let cfg = gradcheck_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // larger-than-init weights so every path carries a visible gradient
    let global = perturbed(&ModelParams::init(&cfg, seed)?, 0.3, &mut rng);
    let local = perturbed(&global, 0.05, &mut rng);
    let batch: Vec<Utterance> = (0..2).map(|_| random_utterance(&cfg, &mut rng)).collect();
    let batch_refs: Vec<&Utterance> = batch.iter().collect();
    let reference = EmbeddingReference {
        round: 1,
        vectors: [1, 2]
            .into_iter()
            .map(|t| (t, normal_tensor(1, cfg.d_model, &mut rng).into_data()))
            .collect(),
    };
    let reg = RegConfig {
        enable_para: true,
        enable_embed: true,
        embed_taps: vec![1, 2],
        enable_loss: true,
        loss_taps: vec![1, 2],
        combined_preset: true,
        ..RegConfig::none()
    };
    let view = GlobalView {
        params: &global,
        reference: Some(&reference),
    };

    let values = |flat: &[f64]| -> Result<[f64; 5]> {
        let p = ModelParams::from_flat(&cfg, flat.to_vec())?;
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let o = local_objective(&mut g, &batch_refs, &b, &view, &reg)?;
        let v = |x: Option<crate::numerics::Var>| g.value(x.expect("active")).item();
        Ok([
            g.value(o.ctc).item(),
            v(o.para),
            v(o.embed),
            v(o.loss),
            g.value(o.total).item(),
        ])
    };

    let mut g = Graph::new();
    let bound = local.bind(&mut g, true);
    let o = local_objective(&mut g, &batch_refs, &bound, &view, &reg)?;
    let nodes = [
        o.ctc,
        o.para.expect("para"),
        o.embed.expect("embed"),
        o.loss.expect("loss"),
        o.total,
    ];
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(5);
    for node in nodes {
        let grads = g.backward(node)?;
        let mut flat = Vec::with_capacity(local.len());
        for v in bound.vars() {
            grads.extend_into(*v, &mut flat);
        }
        analytic.push(flat);
    }

    let mut failures = Vec::new();
    let mut err = None;
    let mut checked = 0;
    let mut nonzero = [0; 5];
    for _ in 0..coords {
        let i = rng.gen_range(0..local.len());
        let mut numeric = [0.0; 5];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut f = |x: &[f64]| match values(x) {
                Ok(v) => v[k],
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            };
            *slot = central_difference(&mut f, local.flat(), i, FD_STEP);
        }
        for k in 0..5 {
            checked += 1;
            if analytic[k][i].abs() > FD_ABS_TOL {
                nonzero[k] += 1;
            }
            if !gradients_agree(analytic[k][i], numeric[k], FD_REL_TOL, FD_ABS_TOL) {
                failures.push((GRADIENT_TERMS[k], i, analytic[k][i], numeric[k]));
            }
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(GradientCase {
        checked,
        nonzero,
        failures,
    })
}

/// Small shards of unequal size for the equivalence oracle.
pub fn equivalence_shards(cfg: &ModelConfig, seed: u64) -> Vec<ClientShard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [3usize, 5, 4]
        .iter()
        .enumerate()
        .map(|(id, &n)| ClientShard {
            id,
            severity: None,
            train: (0..n)
                .map(|_| Utterance {
                    client: id,
                    ..random_utterance(cfg, &mut rng)
                })
                .collect(),
        })
        .collect()
}

/// Max element-wise gap between FedAvg (one full-batch step per round,
/// no regularization) and centralized SGD on the weighted loss, per step.
pub fn fedavg_equivalence_gaps(steps: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = gradcheck_model();
    let shards = equivalence_shards(&cfg, seed);
    let init = ModelParams::init(&cfg, seed)?;
    let lr = 0.05;
    let largest = shards.iter().map(|s| s.train.len()).max().unwrap_or(1);
    let mut fed = Federation::new(
        &shards,
        init.clone(),
        RegConfig::none(),
        CommSchedule {
            local_steps: LocalSteps::Batches(1),
            total_rounds: steps,
            participation: 1.0,
        },
        TrainConfig {
            lr,
            batch_size: largest,
        },
        seed,
    )?;
    let weights = client_weights(&shards.iter().map(|s| s.train.len()).collect::<Vec<_>>());
    let data: Vec<(&[Utterance], f64)> = shards
        .iter()
        .zip(&weights)
        .map(|(s, &w)| (s.train.as_slice(), w))
        .collect();
    let mut central = init;
    let mut gaps = Vec::with_capacity(steps);
    for _ in 0..steps {
        fed.run_round()?;
        central = centralized_weighted_step(&central, &data, lr)?;
        let gap = fed
            .global
            .params
            .flat()
            .iter()
            .zip(central.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        gaps.push(gap);
    }
    Ok(gaps)
}

/// Runs every oracle suite; `quick` shrinks the case counts.
pub fn run_checks(quick: bool) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();

    let cases = if quick { 20 } else { 100 };
    let mut failures = 0;
    let mut checked = 0;
    let mut first = String::new();
    for seed in 0..cases {
        let c = gradient_case(seed, 20)?;
        checked += c.checked;
        if let (Some(f), true) = (c.failures.first(), first.is_empty()) {
            first = format!(
                " first: {} coord {} analytic {} numeric {}",
                f.0, f.1, f.2, f.3
            );
        }
        failures += c.failures.len();
    }
    out.push(CheckReport {
        name: "gradient".into(),
        passed: failures == 0,
        detail: format!("{checked} derivatives over {cases} cases, {failures} mismatches{first}"),
    });

    let n = if quick { 50 } else { 200 };
    let gap = ctc_oracle_gap(n, 7)?;
    out.push(CheckReport {
        name: "ctc-brute-force".into(),
        passed: gap <= CTC_TOL,
        detail: format!("{n} instances, max |dp - enumeration| = {gap:e}"),
    });

    let gaps = fedavg_equivalence_gaps(10, 3)?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    out.push(CheckReport {
        name: "fedavg-equivalence".into(),
        passed: worst <= EQUIVALENCE_TOL,
        detail: format!("10 steps, max element-wise gap {worst:e}"),
    });

    let len = if quick { 4 } else { 5 };
    let bad = edit_distance_mismatches(len);
    out.push(CheckReport {
        name: "wer-brute-force".into(),
        passed: bad == 0,
        detail: format!("all pairs up to length {len}, {bad} mismatches"),
    });
    Ok(out)
}
