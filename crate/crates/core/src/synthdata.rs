//! Synthetic heterogeneous client corpora.
//!
//! Every word of a small lexicon is spelled with character tokens; every
//! character token owns a fixed prototype of feature frames. A clean
//! utterance is silence, then the prototype frames of each token separated
//! by silence frames, which guarantees `frames >= 2 * labels + 1`. Clients
//! differ by a severity level that scales three distortions: a per-client
//! affine channel, additive Gaussian noise and random frame repetition.
//! Client word frequencies are drawn from a Dirichlet distribution.
//!
//! Label ids: 0 is the CTC blank, 1 separates words, `2..vocab_size` are
//! characters.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::LabelSeq;
use crate::numerics::Tensor;

/// Word separator token.
pub const WORD_SEP: usize = 1;

const CORPUS_FORMAT: &str = "fedreg-corpus";
const CORPUS_VERSION: u32 = 1;

/// Speech-intelligibility analogue; `VL` is the most distorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    VL,
    L,
    M,
    H,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::VL, Severity::L, Severity::M, Severity::H];

    /// Multiplier applied to every distortion scale.
    pub fn strength(self) -> f64 {
        match self {
            Severity::VL => 1.0,
            Severity::L => 0.75,
            Severity::M => 0.5,
            Severity::H => 0.25,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Severity::VL => "VL",
            Severity::L => "L",
            Severity::M => "M",
            Severity::H => "H",
        };
        f.write_str(s)
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VL" => Ok(Severity::VL),
            "L" => Ok(Severity::L),
            "M" => Ok(Severity::M),
            "H" => Ok(Severity::H),
            other => Err(Error::Data(format!("unknown severity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_clients: usize,
    pub utterances_min: usize,
    pub utterances_max: usize,
    pub test_per_client: usize,
    /// Output classes including blank and the word separator.
    pub vocab_size: usize,
    pub lexicon_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub input_dim: usize,
    pub frames_per_token: usize,
    /// Severities assigned to clients round-robin.
    pub severity_mix: Vec<Severity>,
    pub noise_scale: f64,
    pub channel_scale: f64,
    /// Probability of repeating a frame at full strength.
    pub stretch_scale: f64,
    /// Dirichlet concentration of client word frequencies; `None` is uniform.
    pub dirichlet_alpha: Option<f64>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_clients: 16,
            utterances_min: 60,
            utterances_max: 180,
            test_per_client: 20,
            vocab_size: 8,
            lexicon_size: 16,
            word_len_min: 1,
            word_len_max: 3,
            words_min: 1,
            words_max: 2,
            input_dim: 12,
            frames_per_token: 2,
            severity_mix: Severity::ALL.to_vec(),
            noise_scale: 0.6,
            channel_scale: 0.8,
            stretch_scale: 0.5,
            dirichlet_alpha: Some(1.0),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// 16 clients, one per speaker.
    pub fn dysarthric_like() -> Self {
        Self::default()
    }

    /// 10 clients with milder, more uniform distortion.
    pub fn elderly_like() -> Self {
        Self {
            n_clients: 10,
            severity_mix: vec![Severity::M, Severity::H],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, lo: usize, hi: usize| {
            if lo == 0 || lo > hi {
                Err(config_err(format!(
                    "{name} range {lo}..={hi} is empty or starts at 0"
                )))
            } else {
                Ok(())
            }
        };
        if self.n_clients == 0 {
            return Err(config_err("n_clients must be at least 1"));
        }
        range("utterances", self.utterances_min, self.utterances_max)?;
        range("word_len", self.word_len_min, self.word_len_max)?;
        range("words", self.words_min, self.words_max)?;
        if self.vocab_size < 3 {
            return Err(config_err(
                "vocab_size must cover blank, separator and one character",
            ));
        }
        if self.lexicon_size == 0 || self.input_dim == 0 || self.frames_per_token == 0 {
            return Err(config_err(
                "lexicon_size, input_dim and frames_per_token must be positive",
            ));
        }
        if self.severity_mix.is_empty() {
            return Err(config_err("severity_mix is empty"));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("channel_scale", self.channel_scale),
            ("stretch_scale", self.stretch_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(format!("{name} must be finite and >= 0")));
            }
        }
        if self.stretch_scale > 1.0 {
            return Err(config_err(
                "stretch_scale is a probability and must be <= 1",
            ));
        }
        if let Some(a) = self.dirichlet_alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(config_err("dirichlet_alpha must be positive"));
            }
        }
        Ok(())
    }

    pub fn severity_of(&self, client: usize) -> Severity {
        self.severity_mix[client % self.severity_mix.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub client: usize,
    /// `frames × input_dim`.
    pub features: Tensor,
    pub labels: LabelSeq,
    pub severity: Option<Severity>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub severity: Option<Severity>,
    pub train: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scenario: ScenarioConfig,
    pub clients: Vec<ClientShard>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn train_size(&self) -> usize {
        self.clients.iter().map(|c| c.train.len()).sum()
    }

    /// All training data on a single client with id 0.
    pub fn pooled(&self) -> Corpus {
        let train = self
            .clients
            .iter()
            .flat_map(|c| c.train.iter().cloned())
            .collect();
        Corpus {
            scenario: self.scenario.clone(),
            clients: vec![ClientShard {
                id: 0,
                severity: None,
                train,
            }],
            test: self.test.clone(),
        }
    }
}

/// Per-client affine feature distortion `x ↦ x·A + b`.
#[derive(Debug, Clone)]
pub struct Channel {
    matrix: Tensor,
    offset: Vec<f64>,
    noise_std: f64,
    stretch_prob: f64,
}

impl Channel {
    pub fn sample(cfg: &ScenarioConfig, severity: Severity, rng: &mut impl Rng) -> Self {
        let d = cfg.input_dim;
        let s = severity.strength();
        let std_normal = Normal::new(0.0, 1.0).expect("valid");
        let mix = cfg.channel_scale * s / (d as f64).sqrt();
        let mut m = Tensor::identity(d);
        for v in m.data_mut() {
            *v += mix * std_normal.sample(rng);
        }
        let offset = (0..d)
            .map(|_| 0.5 * cfg.channel_scale * s * std_normal.sample(rng))
            .collect();
        Self {
            matrix: m,
            offset,
            noise_std: cfg.noise_scale * s,
            stretch_prob: cfg.stretch_scale * s,
        }
    }

    /// Channel + additive noise, frame count unchanged.
    pub fn distort(&self, clean: &Tensor, rng: &mut impl Rng) -> Tensor {
        let mut out = crate::numerics::matmul(clean, &self.matrix);
        let d = out.cols();
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid");
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.offset[k % d];
            if self.noise_std > 0.0 {
                *v += noise.sample(rng);
            }
        }
        out
    }

    /// Repeats each frame with probability `stretch_prob`.
    pub fn stretch(&self, x: &Tensor, rng: &mut impl Rng) -> Tensor {
        if self.stretch_prob == 0.0 {
            return x.clone();
        }
        let d = x.cols();
        let mut data = Vec::with_capacity(x.len() * 2);
        let mut frames = 0;
        for r in 0..x.rows() {
            let reps = if rng.gen_bool(self.stretch_prob) {
                2
            } else {
                1
            };
            for _ in 0..reps {
                data.extend_from_slice(x.row_slice(r));
                frames += 1;
            }
        }
        Tensor::from_rows(frames, d, data)
    }
}

struct Generator<'a> {
    cfg: &'a ScenarioConfig,
    prototypes: Vec<Tensor>,
    lexicon: Vec<Vec<usize>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        let mut rng = stream(cfg.seed, 0);
        let std_normal = Normal::new(0.0, 1.0).expect("valid");
        let prototypes = (0..cfg.vocab_size)
            .map(|_| {
                let n = cfg.frames_per_token * cfg.input_dim;
                Tensor::from_rows(
                    cfg.frames_per_token,
                    cfg.input_dim,
                    (0..n).map(|_| std_normal.sample(&mut rng)).collect(),
                )
            })
            .collect();
        let lexicon = (0..cfg.lexicon_size)
            .map(|_| {
                let len = rng.gen_range(cfg.word_len_min..=cfg.word_len_max);
                (0..len)
                    .map(|_| rng.gen_range(WORD_SEP + 1..cfg.vocab_size))
                    .collect()
            })
            .collect();
        Self {
            cfg,
            prototypes,
            lexicon,
        }
    }

    fn labels(&self, words: &WeightedIndex<f64>, rng: &mut impl Rng) -> Vec<usize> {
        let n = rng.gen_range(self.cfg.words_min..=self.cfg.words_max);
        let mut labels = Vec::new();
        for i in 0..n {
            if i > 0 {
                labels.push(WORD_SEP);
            }
            labels.extend(&self.lexicon[words.sample(rng)]);
        }
        labels
    }

    fn clean(&self, labels: &[usize]) -> Tensor {
        let (d, fpt) = (self.cfg.input_dim, self.cfg.frames_per_token);
        let frames = labels.len() * (fpt + 1) + 1;
        let mut data = Vec::with_capacity(frames * d);
        data.extend(std::iter::repeat_n(0.0, d));
        for &t in labels {
            data.extend_from_slice(self.prototypes[t].data());
            data.extend(std::iter::repeat_n(0.0, d));
        }
        Tensor::from_rows(frames, d, data)
    }

    fn utterance(
        &self,
        client: usize,
        severity: Severity,
        channel: &Channel,
        words: &WeightedIndex<f64>,
        rng: &mut impl Rng,
    ) -> Utterance {
        let labels = self.labels(words, rng);
        let clean = self.clean(&labels);
        let x = channel.distort(&clean, rng);
        let x = channel.stretch(&x, rng);
        Utterance {
            client,
            features: x,
            labels: LabelSeq::new(labels).expect("generated labels are non-empty"),
            severity: Some(severity),
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Client word frequencies from `Dirichlet(alpha)`; uniform when `alpha` is `None`.
pub fn word_distribution(alpha: Option<f64>, words: usize, rng: &mut impl Rng) -> Vec<f64> {
    match alpha {
        None => vec![1.0 / words as f64; words],
        Some(a) => {
            let gamma = rand_distr::Gamma::new(a, 1.0).expect("positive shape");
            let mut w: Vec<f64> = (0..words).map(|_| gamma.sample(rng)).collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                // every draw underflowed: put all mass on one word
                let k = rng.gen_range(0..words);
                w.iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = (i == k) as u8 as f64);
            }
            w
        }
    }
}

/// Builds the training shards and held-out test set. Pure in `cfg`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Corpus> {
    cfg.validate()?;
    let gen = Generator::new(cfg);
    let uniform = WeightedIndex::new(vec![1.0; cfg.lexicon_size]).expect("non-empty");
    let mut clients = Vec::with_capacity(cfg.n_clients);
    let mut test = Vec::new();
    for id in 0..cfg.n_clients {
        let mut rng = stream(cfg.seed, id as u64 + 1);
        let severity = cfg.severity_of(id);
        let channel = Channel::sample(cfg, severity, &mut rng);
        let freqs = word_distribution(cfg.dirichlet_alpha, cfg.lexicon_size, &mut rng);
        let words = WeightedIndex::new(&freqs).map_err(|e| Error::Data(e.to_string()))?;
        let n = rng.gen_range(cfg.utterances_min..=cfg.utterances_max);
        let train = (0..n)
            .map(|_| gen.utterance(id, severity, &channel, &words, &mut rng))
            .collect();
        for _ in 0..cfg.test_per_client {
            test.push(gen.utterance(id, severity, &channel, &uniform, &mut rng));
        }
        clients.push(ClientShard {
            id,
            severity: Some(severity),
            train,
        });
    }
    Ok(Corpus {
        scenario: cfg.clone(),
        clients,
        test,
    })
}

/// Summary of how training data is spread over clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    /// Per client, occurrences of each label id.
    pub label_histograms: Vec<Vec<usize>>,
    /// Per client, Shannon entropy (nats) of the label histogram.
    pub label_entropy: Vec<f64>,
}

impl PartitionStats {
    pub fn mean_entropy(&self) -> f64 {
        self.label_entropy.iter().sum::<f64>() / self.label_entropy.len().max(1) as f64
    }
}

pub fn partition_stats(shards: &[ClientShard], vocab_size: usize) -> PartitionStats {
    let counts: Vec<usize> = shards.iter().map(|s| s.train.len()).collect();
    let weights = client_weights(&counts);
    let label_histograms: Vec<Vec<usize>> = shards
        .iter()
        .map(|s| {
            let mut h = vec![0; vocab_size];
            for u in &s.train {
                for &t in u.labels.tokens() {
                    if t < vocab_size {
                        h[t] += 1;
                    }
                }
            }
            h
        })
        .collect();
    let label_entropy = label_histograms
        .iter()
        .map(|h| {
            let total: usize = h.iter().sum();
            if total == 0 {
                return 0.0;
            }
            h.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        })
        .collect();
    PartitionStats {
        counts,
        weights,
        label_histograms,
        label_entropy,
    }
}

/// `nᵢ / Σ nⱼ`.
pub fn client_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    scenario: ScenarioConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    split: String,
    client: usize,
    severity: Option<Severity>,
    labels: Vec<usize>,
    frames: usize,
    dim: usize,
    features: Vec<f64>,
}

impl Record {
    fn from_utterance(split: &str, u: &Utterance) -> Self {
        Record {
            split: split.into(),
            client: u.client,
            severity: u.severity,
            labels: u.labels.tokens().to_vec(),
            frames: u.features.rows(),
            dim: u.features.cols(),
            features: u.features.data().to_vec(),
        }
    }

    fn into_utterance(self) -> Result<Utterance> {
        if self.frames * self.dim != self.features.len() || self.frames == 0 {
            return Err(Error::Data(format!(
                "utterance of client {} declares {}x{} but carries {} values",
                self.client,
                self.frames,
                self.dim,
                self.features.len()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Utterance {
            client: self.client,
            features: Tensor::from_rows(self.frames, self.dim, self.features),
            labels: LabelSeq::new(self.labels)?,
            severity: self.severity,
        })
    }
}

/// Writes the corpus as JSON lines: a header, then one utterance per line.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        scenario: corpus.scenario.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for shard in &corpus.clients {
        for u in &shard.train {
            serde_json::to_writer(&mut w, &Record::from_utterance("train", u))?;
            w.write_all(b"\n")?;
        }
    }
    for u in &corpus.test {
        serde_json::to_writer(&mut w, &Record::from_utterance("test", u))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data("corpus file is empty".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Data(format!(
            "unsupported corpus format {} v{}",
            header.format, header.version
        )));
    }
    let mut shards: BTreeMap<usize, ClientShard> = BTreeMap::new();
    let mut test = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let split = rec.split.clone();
        let u = rec.into_utterance()?;
        match split.as_str() {
            "train" => shards
                .entry(u.client)
                .or_insert_with(|| ClientShard {
                    id: u.client,
                    severity: u.severity,
                    train: Vec::new(),
                })
                .train
                .push(u),
            "test" => test.push(u),
            other => return Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
    Ok(Corpus {
        scenario: header.scenario,
        clients: shards.into_values().collect(),
        test,
    })
}

/// Shuffled copy of indices `0..n`.
pub(crate) fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
