use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::federation::{CommSchedule, ExperimentSetup, TrainConfig, TrainingMode};
use crate::model::ModelConfig;
use crate::regularizers::RegConfig;
use crate::synthdata::{generate_scenario, read_corpus, Corpus, ScenarioConfig};

/// Experiment description loaded from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Synthetic scenario; ignored when `corpus` is set.
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    /// JSON-lines corpus produced by `generate`.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default)]
    pub schedule: CommSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Train a single client on the pooled data.
    #[serde(default)]
    pub centralized: bool,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default = "one")]
    pub threads: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn one() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scenario: None,
            corpus: None,
            reg: RegConfig::default(),
            schedule: CommSchedule::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            centralized: false,
            eval_every: 1,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reg.validate(&self.model)?;
        self.schedule.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(config_err("seeds is empty"));
        }
        if self.eval_every == 0 || self.threads == 0 {
            return Err(config_err("eval_every and threads must be at least 1"));
        }
        if self.scenario.is_some() && self.corpus.is_some() {
            return Err(config_err("set either scenario or corpus, not both"));
        }
        let scenario = self.scenario.clone().unwrap_or_default();
        if self.corpus.is_none() {
            scenario.validate()?;
            self.check_data_shape(scenario.vocab_size, scenario.input_dim)?;
        }
        Ok(())
    }

    fn check_data_shape(&self, vocab: usize, input_dim: usize) -> Result<()> {
        if self.model.vocab_size < vocab {
            return Err(config_err(format!(
                "model vocab_size {} is smaller than the data vocabulary {vocab}",
                self.model.vocab_size
            )));
        }
        if self.model.input_dim != input_dim {
            return Err(config_err(format!(
                "model input_dim {} does not match feature width {input_dim}",
                self.model.input_dim
            )));
        }
        Ok(())
    }

    /// Loads or generates the corpus and checks it against the model.
    pub fn corpus(&self) -> Result<Corpus> {
        let corpus = match &self.corpus {
            Some(path) => {
                let f = std::fs::File::open(path)?;
                read_corpus(std::io::BufReader::new(f))?
            }
            None => generate_scenario(&self.scenario.clone().unwrap_or_default())?,
        };
        self.check_data_shape(corpus.scenario.vocab_size, corpus.scenario.input_dim)?;
        Ok(corpus)
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            model: self.model.clone(),
            reg: self.reg.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            mode: if self.centralized {
                TrainingMode::Centralized
            } else {
                TrainingMode::Federated
            },
            eval_every: self.eval_every,
            threads: self.threads,
        }
    }
}
