//! CTC negative log-likelihood, KL divergence and squared L2 distance.
//!
//! Each loss has a graph form (differentiable through [`Graph::backward`])
//! and a value form built on the same graph code.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Index of the CTC blank symbol.
pub const BLANK: usize = 0;

/// Probabilities are clamped to this floor before taking logs in the KL term.
pub const KL_FLOOR: f64 = 1e-12;

/// Non-empty target sequence without blanks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("label sequence is empty".into()));
        }
        if tokens.contains(&BLANK) {
            return Err(Error::Data(
                "label sequence contains the blank symbol".into(),
            ));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames that admit an alignment: one per label plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }

    pub fn is_feasible(&self, frames: usize) -> bool {
        frames >= self.min_frames()
    }
}

impl TryFrom<Vec<usize>> for LabelSeq {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSeq> for Vec<usize> {
    fn from(l: LabelSeq) -> Self {
        l.0
    }
}

/// `-log P(labels | log_probs)` by the log-space alpha recursion.
///
/// `log_probs` is `frames × vocab`. Returns [`Error::InfeasibleSample`]
/// when there are too few frames for the labels.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &LabelSeq) -> Result<Var> {
    let (frames, vocab) = {
        let lp = g.value(log_probs);
        (lp.rows(), lp.cols())
    };
    if let Some(&bad) = labels.tokens().iter().find(|&&t| t >= vocab) {
        return Err(config_err(format!(
            "label {bad} outside vocabulary of {vocab}"
        )));
    }
    if !labels.is_feasible(frames) {
        return Err(Error::InfeasibleSample {
            labels: labels.len(),
            required: labels.min_frames(),
            frames,
        });
    }

    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &t in labels.tokens() {
        ext.push(t);
        ext.push(BLANK);
    }
    let states = ext.len();

    let mut prev: Vec<Option<Var>> = vec![None; states];
    prev[0] = Some(g.element(log_probs, ext[0]));
    prev[1] = Some(g.element(log_probs, ext[1]));
    for t in 1..frames {
        let mut cur: Vec<Option<Var>> = vec![None; states];
        for s in 0..states {
            let mut incoming = Vec::with_capacity(3);
            if let Some(v) = prev[s] {
                incoming.push(v);
            }
            if s >= 1 {
                if let Some(v) = prev[s - 1] {
                    incoming.push(v);
                }
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                if let Some(v) = prev[s - 2] {
                    incoming.push(v);
                }
            }
            if incoming.is_empty() {
                continue;
            }
            let reach = g.log_sum_exp(&incoming);
            let emit = g.element(log_probs, t * vocab + ext[s]);
            cur[s] = Some(g.add_scalars(&[reach, emit]));
        }
        prev = cur;
    }
    let ends: Vec<Var> = prev[states - 2..].iter().flatten().copied().collect();
    if ends.is_empty() {
        return Err(Error::InfeasibleSample {
            labels: labels.len(),
            required: labels.min_frames(),
            frames,
        });
    }
    let log_likelihood = g.log_sum_exp(&ends);
    Ok(g.scale(log_likelihood, -1.0))
}

/// Mean over rows of `Σ p·ln(p/q)`, with `q` floored at [`KL_FLOOR`].
///
/// `p` is floored the same way inside its own log so that identical inputs
/// give exactly zero.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (ps, qs) = (g.value(p).shape().to_vec(), g.value(q).shape().to_vec());
    if ps != qs {
        return Err(config_err(format!("KL shape mismatch {ps:?} vs {qs:?}")));
    }
    let rows = g.value(p).rows();
    let lp = g.log_clamped(p, KL_FLOOR);
    let lq = g.log_clamped(q, KL_FLOOR);
    let diff = g.sub(lp, lq);
    let weighted = g.mul(p, diff);
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// `Σ (aᵢ - bᵢ)²`.
pub fn squared_l2_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    if sa != sb {
        return Err(config_err(format!(
            "distance shape mismatch {sa:?} vs {sb:?}"
        )));
    }
    let d = g.sub(a, b);
    Ok(g.squared_l2_norm(d))
}

pub fn ctc_loss_value(log_probs: &Tensor, labels: &LabelSeq) -> Result<f64> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let loss = ctc_loss(&mut g, lp, labels)?;
    Ok(g.value(loss).item())
}

pub fn kl_divergence_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let kl = kl_divergence(&mut g, pv, qv)?;
    Ok(g.value(kl).item())
}

pub fn squared_l2_distance_value(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(config_err(format!(
            "distance length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax_rows;

    fn uniform(frames: usize, vocab: usize) -> Tensor {
        Tensor::from_rows(frames, vocab, vec![-(vocab as f64).ln(); frames * vocab])
    }

    #[test]
    fn single_frame_single_label() {
        let l = LabelSeq::new(vec![1]).unwrap();
        let loss = ctc_loss_value(&uniform(1, 2), &l).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_single_label_has_three_alignments() {
        // a a, a -, - a  at 0.5 each -> 0.75
        let l = LabelSeq::new(vec![1]).unwrap();
        let loss = ctc_loss_value(&uniform(2, 2), &l).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeated_labels_need_separating_blank() {
        let l = LabelSeq::new(vec![1, 1]).unwrap();
        assert_eq!(l.min_frames(), 3);
        assert!(matches!(
            ctc_loss_value(&uniform(2, 3), &l),
            Err(Error::InfeasibleSample {
                required: 3,
                frames: 2,
                ..
            })
        ));
        // only "a - a" remains at T = 3
        let loss = ctc_loss_value(&uniform(3, 2), &l).unwrap();
        assert!((loss - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_validation() {
        assert!(LabelSeq::new(vec![]).is_err());
        assert!(LabelSeq::new(vec![1, 0]).is_err());
        let l = LabelSeq::new(vec![4]).unwrap();
        assert!(matches!(
            ctc_loss_value(&uniform(3, 3), &l),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::row(vec![0.5, 0.5]);
        assert_eq!(kl_divergence_value(&p, &p).unwrap(), 0.0);
        let q = Tensor::row(vec![0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence_value(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.14384).abs() < 1e-5);
        assert!(kl_divergence_value(&p, &Tensor::row(vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn kl_averages_over_rows() {
        let p = Tensor::from_rows(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let q = Tensor::from_rows(2, 2, vec![0.25, 0.75, 0.5, 0.5]);
        let one = kl_divergence_value(&Tensor::row(vec![0.5, 0.5]), &Tensor::row(vec![0.25, 0.75]))
            .unwrap();
        assert!((kl_divergence_value(&p, &q).unwrap() - one / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_tolerates_zero_probabilities() {
        let p = Tensor::row(vec![1.0, 0.0]);
        let q = Tensor::row(vec![0.0, 1.0]);
        let v = kl_divergence_value(&p, &q).unwrap();
        assert!((v - (1.0 / KL_FLOOR).ln()).abs() < 1e-9);
    }

    #[test]
    fn squared_distance_examples() {
        assert_eq!(
            squared_l2_distance_value(&[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            5.0
        );
        assert_eq!(
            squared_l2_distance_value(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        assert!(squared_l2_distance_value(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero_through_log_softmax() {
        // d loss / d logits = softmax - occupancy; each row sums to zero
        let logits = Tensor::from_rows(
            4,
            3,
            vec![
                0.1, -0.3, 0.7, 0.2, 0.0, -1.0, 1.1, 0.4, 0.3, -0.2, 0.5, 0.9,
            ],
        );
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let lp = g.log_softmax(z);
        let loss = ctc_loss(&mut g, lp, &LabelSeq::new(vec![2, 1]).unwrap()).unwrap();
        let grad = g.backward(loss).unwrap().get(z);
        for r in 0..4 {
            assert!(grad.row_slice(r).iter().sum::<f64>().abs() < 1e-12);
        }
        let v = ctc_loss_value(
            &log_softmax_rows(&logits),
            &LabelSeq::new(vec![2, 1]).unwrap(),
        )
        .unwrap();
        assert_eq!(v, g.value(loss).item());
    }
}
