//! Acceptance gate. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed. Criteria run one after another so the wall-clock
//! limits measure each criterion alone.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use fedreg::federation::{
    run_experiment, CommSchedule, ExperimentOutcome, ExperimentSetup, Federation, LocalSteps,
    TrainConfig, TrainingMode,
};
use fedreg::harness::checks::{
    ctc_oracle_gap, edit_distance_mismatches, fedavg_equivalence_gaps, gradient_case,
    random_utterance, GRADIENT_TERMS,
};
use fedreg::harness::significance::mapsswe_test;
use fedreg::model::{forward, forward_graph, resume_from_tap, ModelConfig, ModelParams};
use fedreg::numerics::Graph;
use fedreg::regularizers::{r_loss, r_para_value, RegConfig};
use fedreg::synthdata::{generate_scenario, Corpus, ScenarioConfig, Severity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: Outcome) -> Outcome {
    let took = start.elapsed();
    let timing = format!(" [{:.1}s, limit {}s]", took.as_secs_f64(), limit.as_secs());
    match detail {
        Ok(d) if took <= limit => Ok(d + &timing),
        Ok(d) => Err(d + &timing + " over time"),
        Err(d) => Err(d + &timing),
    }
}

fn fmt_err(e: fedreg::Error) -> String {
    format!("error: {e}")
}

fn fedavg_equivalence() -> Outcome {
    let gaps = fedavg_equivalence_gaps(10, 11).map_err(fmt_err)?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    verdict(
        gaps.len() == 10 && worst <= 1e-10,
        format!(
            "{} steps, max |fl - central| = {worst:e} (tol 1e-10)",
            gaps.len()
        ),
    )
}

fn ctc_enumeration() -> Outcome {
    let gap = ctc_oracle_gap(200, 2024).map_err(fmt_err)?;
    verdict(
        gap <= 1e-10,
        format!("200 instances, max |dp - enumeration| = {gap:e} (tol 1e-10)"),
    )
}

fn gradient_suite() -> Outcome {
    let mut checked = 0;
    let mut nonzero = [0; 5];
    let mut failures = Vec::new();
    for seed in 0..100 {
        let c = gradient_case(seed, 20).map_err(fmt_err)?;
        checked += c.checked;
        for (n, m) in nonzero.iter_mut().zip(c.nonzero) {
            *n += m;
        }
        failures.extend(c.failures.into_iter().map(|f| (seed, f)));
    }
    let coverage = GRADIENT_TERMS
        .iter()
        .zip(nonzero)
        .map(|(t, n)| format!("{t}:{n}"))
        .collect::<Vec<_>>()
        .join(" ");
    let mut detail = format!(
        "100 cases, {checked} derivatives, {} mismatches, nonzero {coverage}",
        failures.len()
    );
    if let Some((seed, (term, i, a, n))) = failures.first() {
        detail += &format!("; first seed {seed} {term} coord {i}: {a} vs {n}");
    }
    verdict(
        failures.is_empty() && nonzero.iter().all(|&n| n > 0),
        detail,
    )
}

fn small_model() -> ModelConfig {
    ModelConfig {
        n_blocks: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 6,
        input_dim: 6,
        tap_positions: vec![1, 2, 3],
    }
}

fn small_corpus() -> Corpus {
    generate_scenario(&ScenarioConfig {
        n_clients: 4,
        utterances_min: 4,
        utterances_max: 8,
        test_per_client: 3,
        vocab_size: 6,
        lexicon_size: 6,
        input_dim: 6,
        ..ScenarioConfig::default()
    })
    .expect("corpus")
}

fn small_setup(reg: RegConfig) -> ExperimentSetup {
    ExperimentSetup {
        model: small_model(),
        reg,
        schedule: CommSchedule {
            local_steps: LocalSteps::Batches(3),
            total_rounds: 4,
            participation: 1.0,
        },
        train: TrainConfig {
            lr: 0.05,
            batch_size: 2,
        },
        mode: TrainingMode::Federated,
        eval_every: 1,
        threads: 1,
    }
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.flat().iter().map(|v| v.to_bits()).collect()
}

fn reductions() -> Outcome {
    let corpus = small_corpus();
    let taps = vec![1, 2, 3];
    let zero = RegConfig {
        enable_para: true,
        lambda_para: 0.0,
        enable_embed: true,
        lambda_embed: 0.0,
        embed_taps: taps.clone(),
        enable_loss: true,
        lambda_loss: 0.0,
        loss_taps: taps.clone(),
        combined_preset: false,
    };
    let base = run_experiment(&corpus, &small_setup(RegConfig::none()), 5).map_err(fmt_err)?;
    let zeroed = run_experiment(&corpus, &small_setup(zero), 5).map_err(fmt_err)?;
    let same_objective = base.history.iter().zip(&zeroed.history).all(|(a, b)| {
        a.train_objective.to_bits() == b.train_objective.to_bits() && a.eval == b.eval
    });
    let a = bits(&base.final_params) == bits(&zeroed.final_params) && same_objective;

    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut b = true;
    let mut c = true;
    for seed in 0..50 {
        let p = ModelParams::init(&cfg, seed).map_err(fmt_err)?;
        let mut q = p.clone();
        q.flat_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
        let u = random_utterance(&cfg, &mut rng);
        b &= r_para_value(&q, &q).map_err(fmt_err)? == 0.0;
        let mut g = Graph::new();
        let local = q.bind(&mut g, true);
        let global = q.bind(&mut g, false);
        let x = g.constant(u.features.clone());
        let trace = forward_graph(&mut g, &local, x, &taps).map_err(fmt_err)?;
        let r = r_loss(&mut g, &trace, &global, &taps).map_err(fmt_err)?;
        b &= g.value(r).item() == 0.0;

        let full = forward(&q, &u.features, &taps).map_err(fmt_err)?;
        for &l in &taps {
            let resumed = resume_from_tap(&q, &full.embeddings[&l], l).map_err(fmt_err)?;
            c &= resumed
                .data()
                .iter()
                .zip(full.logits.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    verdict(
        a && b && c,
        format!("(a) zero-lambda run bitwise equal: {a}; (b) R_para = R_loss = 0 at local == global: {b}; (c) resume bitwise at every tap over 50 seeds: {c}"),
    )
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        n_blocks: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 8,
        input_dim: 12,
        tap_positions: vec![1, 2, 3, 4],
    }
}

/// 16 clients over all four severities, 8 to 24 utterances each.
fn desk_corpus() -> Corpus {
    generate_scenario(&ScenarioConfig {
        n_clients: 16,
        utterances_min: 8,
        utterances_max: 24,
        test_per_client: 20,
        severity_mix: vec![Severity::VL, Severity::L, Severity::M, Severity::H],
        ..ScenarioConfig::default()
    })
    .expect("corpus")
}

fn desk_setup(reg: RegConfig, schedule: CommSchedule, mode: TrainingMode) -> ExperimentSetup {
    ExperimentSetup {
        model: desk_model(),
        reg,
        schedule,
        train: TrainConfig {
            lr: 0.03,
            batch_size: 4,
        },
        mode,
        eval_every: usize::MAX,
        threads: 1,
    }
}

fn word_errors(o: &ExperimentOutcome) -> Vec<f64> {
    o.final_eval()
        .expect("evaluated")
        .segments
        .iter()
        .map(|s| s.word_edits as f64)
        .collect()
}

fn loss_regularization_helps() -> Outcome {
    let corpus = desk_corpus();
    let schedule = CommSchedule {
        local_steps: LocalSteps::Batches(24),
        total_rounds: 10,
        participation: 1.0,
    };
    let loss_reg = RegConfig {
        enable_loss: true,
        lambda_loss: 0.01,
        loss_taps: vec![1, 2, 3, 4],
        ..RegConfig::none()
    };
    let mut wins = 0;
    let mut strict = 0;
    let (mut pooled_base, mut pooled_loss) = (Vec::new(), Vec::new());
    let mut per_seed = Vec::new();
    for seed in 0..10 {
        let base = run_experiment(
            &corpus,
            &desk_setup(RegConfig::none(), schedule.clone(), TrainingMode::Federated),
            seed,
        )
        .map_err(fmt_err)?;
        let reg = run_experiment(
            &corpus,
            &desk_setup(loss_reg.clone(), schedule.clone(), TrainingMode::Federated),
            seed,
        )
        .map_err(fmt_err)?;
        if base.total_steps != reg.total_steps {
            return Err(format!(
                "step budgets differ: {} vs {}",
                base.total_steps, reg.total_steps
            ));
        }
        let (wb, wl) = (
            base.final_eval().unwrap().overall().wer,
            reg.final_eval().unwrap().overall().wer,
        );
        wins += usize::from(wl <= wb);
        strict += usize::from(wl < wb);
        per_seed.push(format!("{wl:.4}/{wb:.4}"));
        pooled_base.extend(word_errors(&base));
        pooled_loss.extend(word_errors(&reg));
    }
    let t = mapsswe_test(&pooled_loss, &pooled_base).map_err(fmt_err)?;
    verdict(
        wins >= 7,
        format!(
            "loss@all lambda 0.01 WER <= baseline in {wins}/10 seeds ({strict} strict; need 7); loss/base per seed {}; pooled matched-pairs over {} segments: mean diff {:.4}, z {:.3}, {}",
            per_seed.join(" "),
            t.segments,
            t.mean_difference,
            t.z,
            if t.significant { "significant at 0.05" } else { "not significant at 0.05" }
        ),
    )
}

fn sync_frequency_gap() -> Outcome {
    let corpus = desk_corpus();
    let train = TrainConfig {
        lr: 0.03,
        batch_size: 4,
    };
    let nb = corpus
        .clients
        .iter()
        .map(|c| train.batches_per_epoch(c.train.len()))
        .max()
        .unwrap_or(0);
    let epochs = 40;
    let every_batch = CommSchedule::every_batches(1, epochs, nb).map_err(fmt_err)?;
    let every_epoch = CommSchedule {
        local_steps: LocalSteps::Epoch,
        total_rounds: epochs,
        participation: 1.0,
    };
    let mut closer = 0;
    let mut per_seed = Vec::new();
    for seed in 0..10 {
        let run = |s: &CommSchedule, mode| {
            run_experiment(
                &corpus,
                &desk_setup(RegConfig::none(), s.clone(), mode),
                seed,
            )
        };
        let fb = run(&every_batch, TrainingMode::Federated).map_err(fmt_err)?;
        let fe = run(&every_epoch, TrainingMode::Federated).map_err(fmt_err)?;
        let c = run(&every_epoch, TrainingMode::Centralized).map_err(fmt_err)?;
        if fb.total_steps != fe.total_steps {
            return Err(format!(
                "step budgets differ: {} vs {}",
                fb.total_steps, fe.total_steps
            ));
        }
        let loss = |o: &ExperimentOutcome| o.final_eval().unwrap().overall().ctc_loss;
        let (gb, ge) = ((loss(&fb) - loss(&c)).abs(), (loss(&fe) - loss(&c)).abs());
        closer += usize::from(gb <= ge);
        per_seed.push(format!("{gb:.3}/{ge:.3}"));
    }
    verdict(
        closer >= 8,
        format!(
            "gap to centralized at sync-every-batch <= sync-every-epoch in {closer}/10 seeds (need 8); {} steps each; batch/epoch gaps {}",
            epochs * nb,
            per_seed.join(" ")
        ),
    )
}

fn communication_counters() -> Outcome {
    let corpus = small_corpus();
    let cfg = small_model();
    let rounds = 3;
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, embed_taps) in [
        ("off", None),
        ("taps 1,3", Some(vec![1, 3])),
        ("all taps", Some(vec![1, 2, 3])),
    ] {
        let reg = match &embed_taps {
            None => RegConfig {
                enable_loss: true,
                loss_taps: vec![2],
                ..RegConfig::none()
            },
            Some(t) => RegConfig {
                enable_embed: true,
                embed_taps: t.clone(),
                ..RegConfig::none()
            },
        };
        let init = ModelParams::init(&cfg, 1).map_err(fmt_err)?;
        let w = init.len() as u64;
        let mut fed = Federation::new(
            &corpus.clients,
            init,
            reg,
            CommSchedule {
                local_steps: LocalSteps::Batches(1),
                total_rounds: rounds,
                participation: 1.0,
            },
            TrainConfig {
                lr: 0.05,
                batch_size: 2,
            },
            1,
        )
        .map_err(fmt_err)?;
        for _ in 0..rounds {
            fed.run_round().map_err(fmt_err)?;
        }
        let n = corpus.clients.len() as u64;
        let r = rounds as u64;
        let taps = embed_taps.map_or(0, |t| t.len() as u64);
        let want_params = r * 2 * n * w;
        let want_embed = r * n * taps * cfg.d_model as u64;
        let got = fed.global.comm;
        ok &= got.param_scalars == want_params && got.embed_scalars == want_embed;
        lines.push(format!(
            "{name}: params {}/{want_params} embed {}/{want_embed}",
            got.param_scalars, got.embed_scalars
        ));
    }
    verdict(ok, lines.join("; "))
}

fn edit_distance_oracle() -> Outcome {
    let bad = edit_distance_mismatches(5);
    verdict(
        bad == 0,
        format!("all 364^2 pairs up to length 5 over 3 symbols, {bad} mismatches"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 8] = [
        ("1 fedavg-centralized equivalence", 10, fedavg_equivalence),
        ("2 ctc dp vs enumeration", 30, ctc_enumeration),
        ("3 gradient suite", 120, gradient_suite),
        ("4 reduction identities", 60, reductions),
        (
            "5 loss regularization vs baseline",
            900,
            loss_regularization_helps,
        ),
        ("6 sync frequency gap", 900, sync_frequency_gap),
        ("7 communication counters", 60, communication_counters),
        ("8 edit distance vs recursion", 60, edit_distance_oracle),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let out = within(Duration::from_secs(limit), start, run());
        match &out {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                println!("FAIL criterion {name}: {d}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
