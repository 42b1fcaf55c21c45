//! Parameter-, embedding- and loss-based regularization of the local objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::{ctc_loss, kl_divergence, squared_l2_distance};
use crate::model::{
    forward_graph, resume_graph, BoundParams, GraphTrace, ModelConfig, ModelParams, ParamGroup,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::Utterance;

/// Penalty weights used when all three regularizers are combined.
pub const COMBINED_LAMBDAS: (f64, f64, f64) = (0.1, 0.1, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub enable_para: bool,
    pub lambda_para: f64,
    pub enable_embed: bool,
    pub lambda_embed: f64,
    pub embed_taps: Vec<usize>,
    pub enable_loss: bool,
    pub lambda_loss: f64,
    pub loss_taps: Vec<usize>,
    /// Overrides the individual weights with [`COMBINED_LAMBDAS`].
    pub combined_preset: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            enable_para: false,
            lambda_para: 0.01,
            enable_embed: false,
            lambda_embed: 0.001,
            embed_taps: vec![4],
            enable_loss: false,
            lambda_loss: 0.01,
            loss_taps: vec![4],
            combined_preset: false,
        }
    }
}

impl RegConfig {
    /// Plain FedAvg.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn lambdas(&self) -> (f64, f64, f64) {
        if self.combined_preset {
            COMBINED_LAMBDAS
        } else {
            (self.lambda_para, self.lambda_embed, self.lambda_loss)
        }
    }

    pub fn para_active(&self) -> bool {
        self.enable_para && self.lambdas().0 > 0.0
    }

    pub fn embed_active(&self) -> bool {
        self.enable_embed && self.lambdas().1 > 0.0
    }

    pub fn loss_active(&self) -> bool {
        self.enable_loss && self.lambdas().2 > 0.0
    }

    /// Clients upload pooled embeddings whenever embedding regularization is
    /// enabled, even with a zero weight.
    pub fn exchanges_embeddings(&self) -> bool {
        self.enable_embed
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let (a, b, c) = self.lambdas();
        for (name, v) in [("lambda_para", a), ("lambda_embed", b), ("lambda_loss", c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (enabled, name, taps) in [
            (self.enable_embed, "embed_taps", &self.embed_taps),
            (self.enable_loss, "loss_taps", &self.loss_taps),
        ] {
            if !enabled {
                continue;
            }
            if taps.is_empty() {
                return Err(config_err(format!("{name} is empty")));
            }
            for t in taps {
                model.check_position(*t)?;
                if !model.tap_positions.contains(t) {
                    return Err(config_err(format!(
                        "{name} contains {t}, which is not a model tap position"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tap positions the forward pass must expose.
    pub fn forward_taps(&self) -> Vec<usize> {
        let mut taps = Vec::new();
        if self.embed_active() {
            taps.extend(&self.embed_taps);
        }
        if self.loss_active() {
            taps.extend(&self.loss_taps);
        }
        taps.sort_unstable();
        taps.dedup();
        taps
    }
}

/// Server-aggregated pooled embedding per tap position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReference {
    /// Round whose client reports produced this reference.
    pub round: usize,
    pub vectors: BTreeMap<usize, Vec<f64>>,
}

/// `‖W_local - W_global‖²` over every tensor except the frontend.
pub fn r_para(g: &mut Graph, local: &BoundParams, global: &ModelParams) -> Result<Var> {
    if local.config() != global.config() {
        return Err(config_err("r_para: local and global configs differ"));
    }
    let mut terms = Vec::new();
    for (i, entry) in global.layout().iter().enumerate() {
        if entry.group == ParamGroup::Frontend {
            continue;
        }
        let reference = g.constant(global.tensor(i));
        terms.push(squared_l2_distance(g, local.vars()[i], reference)?);
    }
    Ok(g.add_scalars(&terms))
}

pub fn r_para_value(local: &ModelParams, global: &ModelParams) -> Result<f64> {
    let mut g = Graph::new();
    let bound = local.bind(&mut g, false);
    let r = r_para(&mut g, &bound, global)?;
    Ok(g.value(r).item())
}

/// Sum over taps of `‖mean_t(e^l) - ē^l‖²` for one utterance.
pub fn r_embed(
    g: &mut Graph,
    trace: &GraphTrace,
    reference: &EmbeddingReference,
    taps: &[usize],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(taps.len());
    for &l in taps {
        let e = trace
            .tap(l)
            .ok_or_else(|| config_err(format!("forward trace lacks tap {l}")))?;
        let target = reference
            .vectors
            .get(&l)
            .ok_or_else(|| Error::Protocol(format!("no aggregated embedding for tap {l}")))?;
        let pooled = g.mean_rows(e);
        let target = g.constant(Tensor::row(target.clone()));
        terms.push(squared_l2_distance(g, pooled, target)?);
    }
    Ok(g.add_scalars(&terms))
}

/// Sum over taps of `KL(ŷ ‖ ỹ^l)` for one utterance, where `ỹ^l` comes from
/// pushing the local embedding at tap `l` through the frozen global model.
pub fn r_loss(
    g: &mut Graph,
    trace: &GraphTrace,
    global: &BoundParams,
    taps: &[usize],
) -> Result<Var> {
    if global.vars().iter().any(|v| g.requires_grad(*v)) {
        return Err(Error::Contract(
            "r_loss needs the global model bound as constants".into(),
        ));
    }
    let local_probs = g.softmax(trace.logits);
    let mut terms = Vec::with_capacity(taps.len());
    for &l in taps {
        let e = trace
            .tap(l)
            .ok_or_else(|| config_err(format!("forward trace lacks tap {l}")))?;
        let pseudo_logits = resume_graph(g, global, e, l)?;
        let pseudo = g.softmax(pseudo_logits);
        terms.push(kl_divergence(g, local_probs, pseudo)?);
    }
    Ok(g.add_scalars(&terms))
}

/// Frozen previous-round state a client regularizes against.
pub struct GlobalView<'a> {
    pub params: &'a ModelParams,
    pub reference: Option<&'a EmbeddingReference>,
}

/// Nodes of one evaluation of the local objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub ctc: Var,
    pub para: Option<Var>,
    pub embed: Option<Var>,
    pub loss: Option<Var>,
    /// Utterances that contributed.
    pub used: usize,
    /// Utterances skipped as CTC-infeasible.
    pub skipped: usize,
}

/// `L_CTC + λ_para·R_para + λ_embed·R_embed + λ_loss·R_loss` on one batch.
///
/// CTC and the per-utterance terms are averaged over feasible utterances.
/// Inactive terms are not built at all. Without an embedding reference the
/// embedding term is zero.
pub fn local_objective(
    g: &mut Graph,
    batch: &[&Utterance],
    local: &BoundParams,
    global: &GlobalView<'_>,
    cfg: &RegConfig,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (lp, le, ll) = cfg.lambdas();
    let use_embed = cfg.embed_active() && global.reference.is_some();
    let use_loss = cfg.loss_active();
    let mut taps = Vec::new();
    if use_embed {
        taps.extend(&cfg.embed_taps);
    }
    if use_loss {
        taps.extend(&cfg.loss_taps);
    }
    taps.sort_unstable();
    taps.dedup();

    let frozen = if use_loss {
        Some(global.params.bind(g, false))
    } else {
        None
    };

    let mut ctc_terms = Vec::with_capacity(batch.len());
    let mut embed_terms = Vec::new();
    let mut loss_terms = Vec::new();
    let mut skipped = 0;
    for utt in batch {
        if !utt.labels.is_feasible(utt.features.rows()) {
            skipped += 1;
            continue;
        }
        let x = g.constant(utt.features.clone());
        let trace = forward_graph(g, local, x, &taps)?;
        ctc_terms.push(ctc_loss(g, trace.log_probs, &utt.labels)?);
        if use_embed {
            let reference = global.reference.expect("checked above");
            embed_terms.push(r_embed(g, &trace, reference, &cfg.embed_taps)?);
        }
        if let Some(frozen) = &frozen {
            loss_terms.push(r_loss(g, &trace, frozen, &cfg.loss_taps)?);
        }
    }
    let used = ctc_terms.len();
    if used == 0 {
        return Err(Error::Data(format!(
            "all {} utterances in the batch are CTC-infeasible",
            batch.len()
        )));
    }
    let inv = 1.0 / used as f64;
    let mean = |g: &mut Graph, terms: &[Var]| {
        let s = g.add_scalars(terms);
        g.scale(s, inv)
    };

    let ctc = mean(g, &ctc_terms);
    let mut parts = vec![ctc];
    let para = if cfg.para_active() {
        let r = r_para(g, local, global.params)?;
        parts.push(g.scale(r, lp));
        Some(r)
    } else {
        None
    };
    let embed = if use_embed {
        let r = mean(g, &embed_terms);
        parts.push(g.scale(r, le));
        Some(r)
    } else {
        None
    };
    let loss = if use_loss {
        let r = mean(g, &loss_terms);
        parts.push(g.scale(r, ll));
        Some(r)
    } else {
        None
    };
    let total = if parts.len() == 1 {
        ctc
    } else {
        g.add_scalars(&parts)
    };
    Ok(Objective {
        total,
        ctc,
        para,
        embed,
        loss,
        used,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LabelSeq;
    use crate::model::forward;

    fn cfg() -> ModelConfig {
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

    fn utt(frames: usize, seed: u64) -> Utterance {
        let data = (0..frames * 6)
            .map(|i| ((i as f64 + seed as f64) * 0.37).sin())
            .collect();
        Utterance {
            client: 0,
            features: Tensor::from_rows(frames, 6, data),
            labels: LabelSeq::new(vec![1, 3]).unwrap(),
            severity: None,
        }
    }

    #[test]
    fn r_para_single_weight() {
        let c = cfg();
        let mut local = ModelParams::init(&c, 1).unwrap();
        let global = local.clone();
        assert_eq!(r_para_value(&local, &global).unwrap(), 0.0);

        let idx = local.entry("head.bias").unwrap().offset;
        local.flat_mut()[idx] = global.flat()[idx] + 2.0;
        let mut g = Graph::new();
        let bound = local.bind(&mut g, true);
        let r = r_para(&mut g, &bound, &global).unwrap();
        assert_eq!(g.value(r).item(), 4.0);
        let grads = g.backward(r).unwrap();
        let n = bound.vars().len();
        assert_eq!(grads.get(bound.vars()[n - 1]).data()[0], 4.0);
    }

    #[test]
    fn r_para_ignores_frontend() {
        let c = cfg();
        let global = ModelParams::init(&c, 1).unwrap();
        let mut local = global.clone();
        local.slice_mut("frontend.weight").unwrap()[3] += 10.0;
        local.slice_mut("frontend.bias").unwrap()[0] -= 1.0;
        assert_eq!(r_para_value(&local, &global).unwrap(), 0.0);
    }

    #[test]
    fn r_embed_examples() {
        let mut g = Graph::new();
        let e1 = g.constant(Tensor::from_rows(2, 2, vec![1.0, 0.0, 1.0, 0.0]));
        let e2 = g.constant(Tensor::from_rows(1, 2, vec![0.0, 1.0]));
        let dummy = g.constant(Tensor::scalar(0.0));
        let trace = GraphTrace {
            taps: vec![(1, e1), (2, e2)],
            logits: dummy,
            log_probs: dummy,
        };
        let reference = EmbeddingReference {
            round: 1,
            vectors: [(1, vec![0.0, 1.0]), (2, vec![1.0, 0.0])]
                .into_iter()
                .collect(),
        };
        let one = r_embed(&mut g, &trace, &reference, &[1]).unwrap();
        assert_eq!(g.value(one).item(), 2.0);
        let both = r_embed(&mut g, &trace, &reference, &[1, 2]).unwrap();
        assert_eq!(g.value(both).item(), 4.0);
        let same = EmbeddingReference {
            round: 1,
            vectors: [(1, vec![1.0, 0.0])].into_iter().collect(),
        };
        let zero = r_embed(&mut g, &trace, &same, &[1]).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        assert!(matches!(
            r_embed(&mut g, &trace, &same, &[2]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn r_loss_vanishes_when_models_coincide() {
        let c = cfg();
        let p = ModelParams::init(&c, 4).unwrap();
        let u = utt(6, 1);
        for taps in [vec![1], vec![2], vec![1, 2]] {
            let mut g = Graph::new();
            let local = p.bind(&mut g, true);
            let frozen = p.bind(&mut g, false);
            let x = g.constant(u.features.clone());
            let tr = forward_graph(&mut g, &local, x, &taps).unwrap();
            let r = r_loss(&mut g, &tr, &frozen, &taps).unwrap();
            assert_eq!(g.value(r).item(), 0.0);
        }
    }

    #[test]
    fn r_loss_rejects_trainable_global() {
        let p = ModelParams::init(&cfg(), 4).unwrap();
        let mut g = Graph::new();
        let local = p.bind(&mut g, true);
        let x = g.constant(utt(5, 0).features);
        let tr = forward_graph(&mut g, &local, x, &[1]).unwrap();
        assert!(matches!(
            r_loss(&mut g, &tr, &local, &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn r_loss_matches_explicit_pseudo_distribution() {
        let c = cfg();
        let local = ModelParams::init(&c, 4).unwrap();
        let global = ModelParams::init(&c, 5).unwrap();
        let u = utt(4, 2);
        let mut g = Graph::new();
        let lb = local.bind(&mut g, true);
        let gb = global.bind(&mut g, false);
        let x = g.constant(u.features.clone());
        let tr = forward_graph(&mut g, &lb, x, &[1]).unwrap();
        let r = r_loss(&mut g, &tr, &gb, &[1]).unwrap();

        let local_trace = forward(&local, &u.features, &[1]).unwrap();
        let pseudo =
            crate::model::resume_from_tap(&global, &local_trace.embeddings[&1], 1).unwrap();
        let p = crate::numerics::softmax_rows(&local_trace.logits);
        let q = crate::numerics::softmax_rows(&pseudo);
        let mut expected = 0.0;
        for (a, b) in p.data().iter().zip(q.data()) {
            expected += a * (a / b).ln();
        }
        expected /= 4.0;
        assert!((g.value(r).item() - expected).abs() < 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn zero_lambdas_reduce_to_ctc() {
        let c = cfg();
        let p = ModelParams::init(&c, 4).unwrap();
        let g2 = ModelParams::init(&c, 8).unwrap();
        let (u1, u2) = (utt(6, 1), utt(7, 2));
        let batch = [&u1, &u2];
        let reference = EmbeddingReference {
            round: 1,
            vectors: [(1, vec![0.1; 8]), (2, vec![0.2; 8])].into_iter().collect(),
        };
        let view = GlobalView {
            params: &g2,
            reference: Some(&reference),
        };

        let eval = |rc: &RegConfig| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let o = local_objective(&mut g, &batch, &b, &view, rc).unwrap();
            (g.value(o.total).item(), g.value(o.ctc).item(), o)
        };
        let (base, ctc, o) = eval(&RegConfig::none());
        assert_eq!(base, ctc);
        assert!(o.para.is_none() && o.embed.is_none() && o.loss.is_none());

        let zeroed = RegConfig {
            enable_para: true,
            lambda_para: 0.0,
            enable_embed: true,
            lambda_embed: 0.0,
            embed_taps: vec![1],
            enable_loss: true,
            lambda_loss: 0.0,
            loss_taps: vec![2],
            combined_preset: false,
        };
        assert_eq!(eval(&zeroed).0.to_bits(), base.to_bits());

        let para_only = RegConfig {
            enable_para: true,
            ..RegConfig::none()
        };
        let (total, ctc, _) = eval(&para_only);
        let expected = ctc + 0.01 * r_para_value(&p, &g2).unwrap();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn combined_preset_overrides_weights() {
        let rc = RegConfig {
            combined_preset: true,
            ..RegConfig::none()
        };
        assert_eq!(rc.lambdas(), (0.1, 0.1, 1.0));
        assert_eq!(RegConfig::none().lambdas(), (0.01, 0.001, 0.01));
    }

    #[test]
    fn validation() {
        let c = cfg();
        let bad = RegConfig {
            enable_loss: true,
            loss_taps: vec![3],
            ..RegConfig::none()
        };
        assert!(bad.validate(&c).is_err());
        let neg = RegConfig {
            lambda_para: -1.0,
            ..RegConfig::none()
        };
        assert!(neg.validate(&c).is_err());
        let ok = RegConfig {
            enable_loss: true,
            loss_taps: vec![1, 2],
            ..RegConfig::none()
        };
        assert!(ok.validate(&c).is_ok());
    }
}
