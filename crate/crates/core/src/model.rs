//! Small transformer encoder with a CTC output head.
//!
//! Architecture: linear frontend + fixed sinusoidal positions, `n_blocks`
//! post-norm encoder blocks (multi-head self-attention and a GELU
//! feed-forward layer, each followed by residual + layer norm), and a single
//! linear head producing per-frame logits over the vocabulary. Blank is
//! symbol 0. Embedding taps are numbered from 1 and read the output of the
//! corresponding block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FRSM";
const CHECKPOINT_VERSION: u32 = 1;

/// Tensors per encoder block, in canonical order.
const BLOCK_TENSORS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Output classes including the blank at index 0.
    pub vocab_size: usize,
    pub input_dim: usize,
    /// Blocks whose outputs may be tapped, 1-based.
    pub tap_positions: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 8,
            input_dim: 12,
            tap_positions: vec![1, 2, 3, 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.d_model == 0 || self.d_ff == 0 || self.input_dim == 0 {
            return Err(config_err("model dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(config_err(
                "vocab_size must include blank plus at least one token",
            ));
        }
        for &t in &self.tap_positions {
            self.check_position(t)?;
        }
        Ok(())
    }

    pub fn check_position(&self, position: usize) -> Result<()> {
        if position == 0 || position > self.n_blocks {
            return Err(config_err(format!(
                "tap position {position} outside 1..={}",
                self.n_blocks
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        layout(self).iter().map(|e| e.rows * e.cols).sum()
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Frontend,
    Block(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: ParamGroup,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_gain(&self) -> bool {
        self.name.ends_with(".gain")
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Canonical flattening order of all parameter tensors.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamEntry> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut shapes: Vec<(String, usize, usize, ParamGroup)> = vec![
        (
            "frontend.weight".into(),
            cfg.input_dim,
            d,
            ParamGroup::Frontend,
        ),
        ("frontend.bias".into(), 1, d, ParamGroup::Frontend),
    ];
    for l in 1..=cfg.n_blocks {
        let grp = ParamGroup::Block(l);
        let p = |s: &str| format!("block{l}.{s}");
        shapes.extend([
            (p("attn.query.weight"), d, d, grp),
            (p("attn.query.bias"), 1, d, grp),
            (p("attn.key.weight"), d, d, grp),
            (p("attn.key.bias"), 1, d, grp),
            (p("attn.value.weight"), d, d, grp),
            (p("attn.value.bias"), 1, d, grp),
            (p("attn.out.weight"), d, d, grp),
            (p("attn.out.bias"), 1, d, grp),
            (p("norm1.gain"), 1, d, grp),
            (p("norm1.bias"), 1, d, grp),
            (p("ffn.in.weight"), d, f, grp),
            (p("ffn.in.bias"), 1, f, grp),
            (p("ffn.out.weight"), f, d, grp),
            (p("ffn.out.bias"), 1, d, grp),
            (p("norm2.gain"), 1, d, grp),
            (p("norm2.bias"), 1, d, grp),
        ]);
    }
    shapes.push(("head.weight".into(), d, cfg.vocab_size, ParamGroup::Head));
    shapes.push(("head.bias".into(), 1, cfg.vocab_size, ParamGroup::Head));

    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, rows, cols, group)| {
            let e = ParamEntry {
                name,
                rows,
                cols,
                offset,
                group,
            };
            offset += rows * cols;
            e
        })
        .collect()
}

/// Model parameters as one flat vector plus the layout that names its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Arc<Vec<ParamEntry>>,
    flat: Vec<f64>,
}

impl ModelParams {
    /// Gaussian init (std 0.02) for weight matrices, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut flat = Vec::with_capacity(config.param_count());
        for e in &layout {
            for _ in 0..e.len() {
                let v = if e.is_gain() {
                    1.0
                } else if e.is_bias() {
                    0.0
                } else {
                    normal.sample(&mut rng)
                };
                flat.push(v);
            }
        }
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            flat,
        })
    }

    pub fn from_flat(config: &ModelConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = layout(config);
        let n: usize = layout.iter().map(ParamEntry::len).sum();
        if flat.len() != n {
            return Err(config_err(format!(
                "flat vector has {} values, model needs {n}",
                flat.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            flat,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let e = &self.layout[index];
        Tensor::from_rows(e.rows, e.cols, self.flat[e.range()].to_vec())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    /// Mutable slice of one named tensor.
    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.entry(name)?.range();
        Some(&mut self.flat[range])
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.config == other.config && self.flat.len() == other.flat.len()
    }

    /// Registers every tensor on `g`, as trainable leaves or frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = (0..self.layout.len())
            .map(|i| {
                let t = self.tensor(i);
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams {
            config: self.config.clone(),
            vars,
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            c.n_blocks,
            c.d_model,
            c.n_heads,
            c.d_ff,
            c.vocab_size,
            c.input_dim,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(c.tap_positions.len() as u32).to_le_bytes())?;
        for &t in &c.tap_positions {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
        w.write_all(&(self.flat.len() as u64).to_le_bytes())?;
        for v in &self.flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let n_taps = read_u32(&mut r)? as usize;
        let mut taps = Vec::with_capacity(n_taps);
        for _ in 0..n_taps {
            taps.push(read_u32(&mut r)? as usize);
        }
        let config = ModelConfig {
            n_blocks: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ff: dims[3],
            vocab_size: dims[4],
            input_dim: dims[5],
            tap_positions: taps,
        };
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf) as usize;
        if count != config.param_count() {
            return Err(Error::Data(format!(
                "checkpoint holds {count} values, config implies {}",
                config.param_count()
            )));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
        Self::from_flat(&config, flat)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameter tensors registered on a graph, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn block(&self, l: usize) -> &[Var] {
        let start = 2 + (l - 1) * BLOCK_TENSORS;
        &self.vars[start..start + BLOCK_TENSORS]
    }

    fn head(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// `(position, embedding)` for each requested tap, ascending.
    pub taps: Vec<(usize, Var)>,
    pub logits: Var,
    pub log_probs: Var,
}

impl GraphTrace {
    pub fn tap(&self, position: usize) -> Option<Var> {
        self.taps
            .iter()
            .find(|(p, _)| *p == position)
            .map(|(_, v)| *v)
    }
}

/// Materialized values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embeddings: BTreeMap<usize, Tensor>,
    pub logits: Tensor,
    pub log_probs: Tensor,
}

/// Fixed sinusoidal position table, `frames × d_model`.
pub fn positional_encoding(frames: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; frames * d_model];
    for t in 0..frames {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[t * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_rows(frames, d_model, data)
}

fn encoder_block(g: &mut Graph, cfg: &ModelConfig, p: &[Var], x: Var) -> Var {
    let q = g.matmul(x, p[0]);
    let q = g.add_row(q, p[1]);
    let k = g.matmul(x, p[2]);
    let k = g.add_row(k, p[3]);
    let v = g.matmul(x, p[4]);
    let v = g.add_row(v, p[5]);

    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            let (s, e) = (h * dh, (h + 1) * dh);
            (
                g.slice_cols(q, s, e),
                g.slice_cols(k, s, e),
                g.slice_cols(v, s, e),
            )
        };
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        heads.push(g.matmul(attn, vh));
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let out = g.matmul(ctx, p[6]);
    let out = g.add_row(out, p[7]);
    let res = g.add(x, out);
    let x1 = g.layer_norm(res, p[8], p[9]);

    let hid = g.matmul(x1, p[10]);
    let hid = g.add_row(hid, p[11]);
    let hid = g.gelu(hid);
    let ff = g.matmul(hid, p[12]);
    let ff = g.add_row(ff, p[13]);
    let res = g.add(x1, ff);
    g.layer_norm(res, p[14], p[15])
}

fn head(g: &mut Graph, params: &BoundParams, x: Var) -> Var {
    let (w, b) = params.head();
    let logits = g.matmul(x, w);
    g.add_row(logits, b)
}

/// Full forward pass on an existing graph.
///
/// `features` must be `frames × input_dim`; `taps` must be valid positions.
pub fn forward_graph(
    g: &mut Graph,
    params: &BoundParams,
    features: Var,
    taps: &[usize],
) -> Result<GraphTrace> {
    let cfg = params.config().clone();
    let x = g.value(features);
    if x.rows() == 0 {
        return Err(Error::Data("empty utterance (0 frames)".into()));
    }
    if x.cols() != cfg.input_dim {
        return Err(config_err(format!(
            "feature width {} does not match input_dim {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    for &t in taps {
        cfg.check_position(t)?;
    }
    let frames = x.rows();
    let h = g.matmul(features, params.vars[0]);
    let h = g.add_row(h, params.vars[1]);
    let pe = g.constant(positional_encoding(frames, cfg.d_model));
    let mut h = g.add(h, pe);

    let mut tapped = Vec::new();
    for l in 1..=cfg.n_blocks {
        h = encoder_block(g, &cfg, params.block(l), h);
        if taps.contains(&l) {
            tapped.push((l, h));
        }
    }
    let logits = head(g, params, h);
    let log_probs = g.log_softmax(logits);
    Ok(GraphTrace {
        taps: tapped,
        logits,
        log_probs,
    })
}

/// Runs blocks `position+1..=n_blocks` and the head on a tapped embedding.
pub fn resume_graph(
    g: &mut Graph,
    params: &BoundParams,
    embedding: Var,
    position: usize,
) -> Result<Var> {
    let cfg = params.config().clone();
    cfg.check_position(position)?;
    let width = g.value(embedding).cols();
    if width != cfg.d_model {
        return Err(config_err(format!(
            "embedding width {width} does not match d_model {}",
            cfg.d_model
        )));
    }
    let mut h = embedding;
    for l in position + 1..=cfg.n_blocks {
        h = encoder_block(g, &cfg, params.block(l), h);
    }
    Ok(head(g, params, h))
}

/// Value-level forward pass.
pub fn forward(params: &ModelParams, features: &Tensor, taps: &[usize]) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let trace = forward_graph(&mut g, &bound, x, taps)?;
    Ok(ForwardTrace {
        embeddings: trace
            .taps
            .iter()
            .map(|(l, v)| (*l, g.value(*v).clone()))
            .collect(),
        logits: g.value(trace.logits).clone(),
        log_probs: g.value(trace.log_probs).clone(),
    })
}

/// Value-level [`resume_graph`]; returns logits.
pub fn resume_from_tap(
    params: &ModelParams,
    embedding: &Tensor,
    position: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let e = g.constant(embedding.clone());
    let logits = resume_graph(&mut g, &bound, e, position)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
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

    fn features(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_rows(
            frames,
            dim,
            (0..frames * dim).map(|_| n.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn param_count_matches_hand_count() {
        // frontend 6*8+8 = 56
        // block: 4*(8*8+8) = 288, two norms 2*16 = 32, ffn 8*16+16+16*8+8 = 280 -> 600
        // head 8*5+5 = 45
        assert_eq!(small().param_count(), 56 + 2 * 600 + 45);
        let p = ModelParams::init(&small(), 0).unwrap();
        assert_eq!(p.len(), 1301);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small(), 3).unwrap();
        let b = ModelParams::init(&small(), 3).unwrap();
        let c = ModelParams::init(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat(), c.flat());
        assert_eq!(a.entry("block1.norm1.gain").map(|e| e.len()), Some(8));
        let gain = &a.flat()[a.entry("block1.norm1.gain").unwrap().range()];
        assert!(gain.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.tap_positions = vec![3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut p = ModelParams::init(&small(), 1).unwrap();
        p.slice_mut("head.weight").unwrap().fill(0.0);
        let tr = forward(&p, &features(4, 6, 2), &[]).unwrap();
        for v in tr.log_probs.data() {
            assert!((v.exp() - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic_and_taps_final_block() {
        let p = ModelParams::init(&small(), 5).unwrap();
        let x = features(5, 6, 9);
        let a = forward(&p, &x, &[1, 2]).unwrap();
        let b = forward(&p, &x, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits.rows(), 5);
        assert_eq!(a.embeddings.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        // the head applied to the final tap reproduces the logits
        let w = p.tensor(p.layout().len() - 2);
        let bias = p.flat()[p.entry("head.bias").unwrap().range()].to_vec();
        let mut manual = crate::numerics::matmul(&a.embeddings[&2], &w);
        for r in 0..manual.rows() {
            for c in 0..manual.cols() {
                manual.data_mut()[r * 5 + c] += bias[c];
            }
        }
        assert_eq!(manual, a.logits);
    }

    #[test]
    fn resume_matches_full_forward() {
        let p = ModelParams::init(&small(), 7).unwrap();
        let x = features(5, 6, 1);
        let tr = forward(&p, &x, &[1, 2]).unwrap();
        for l in [1, 2] {
            assert_eq!(
                resume_from_tap(&p, &tr.embeddings[&l], l).unwrap(),
                tr.logits
            );
        }
    }

    #[test]
    fn resume_zero_embedding_with_zero_head_is_uniform() {
        let mut p = ModelParams::init(&small(), 7).unwrap();
        p.slice_mut("head.weight").unwrap().fill(0.0);
        let logits = resume_from_tap(&p, &Tensor::zeros(&[3, 8]), 2).unwrap();
        let probs = crate::numerics::softmax_rows(&logits);
        assert!(probs.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn errors_on_bad_inputs() {
        let p = ModelParams::init(&small(), 7).unwrap();
        assert!(matches!(
            forward(&p, &Tensor::zeros(&[0, 6]), &[]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            resume_from_tap(&p, &Tensor::zeros(&[3, 7]), 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resume_from_tap(&p, &Tensor::zeros(&[3, 8]), 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(&small(), 11).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FRSM");
        assert_eq!(buf.len(), 4 + 4 + 6 * 4 + 4 + 2 * 4 + 8 + 1301 * 8);
        let q = ModelParams::load(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(ModelParams::load(buf.as_slice()).is_err());
    }
}
