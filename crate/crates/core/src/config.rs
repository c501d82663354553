use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MarginConfig, Objective, SinkhornConfig};
use crate::miner::MinerConfig;
use crate::model::ModelConfig;

/// Everything a training run depends on. Missing JSON fields take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub objective: Objective,
    pub weights: LossWeights,
    pub margins: MarginConfig,
    pub sinkhorn: SinkhornConfig,
    pub miner: MinerConfig,
    pub model: ModelConfig,
    /// Mine counterfactuals at the start of training when the sidecar is
    /// missing, instead of failing.
    pub mine_inline: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_epochs: 30,
            learning_rate: 3e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            objective: Objective::Full,
            weights: LossWeights::default(),
            margins: MarginConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            miner: MinerConfig::default(),
            model: ModelConfig::default(),
            mine_inline: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be >= 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("weight_decay must be >= 0 and betas in [0, 1)"));
        }
        self.weights.validate()?;
        self.margins.validate()?;
        self.miner.validate()?;
        self.model.validate()
    }

    /// Fills the vocabulary size from the dataset when unset and checks the
    /// encoder against the dataset's vocabulary, patch size and texts.
    pub fn bind_dataset(&mut self, data: &Dataset) -> Result<()> {
        let enc = &mut self.model.encoder;
        if enc.vocab_size == 0 {
            enc.vocab_size = data.vocab.len();
        }
        check_compatible(&self.model, data)
    }
}

pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let enc = &model.encoder;
    if enc.vocab_size != data.vocab.len() {
        return Err(Error::invalid(format!(
            "model vocabulary size {} does not match the dataset's {}",
            enc.vocab_size,
            data.vocab.len()
        )));
    }
    if enc.patch != data.info.patch || enc.channels != data.info.image_shape[2] {
        return Err(Error::invalid(format!(
            "model expects {}x{} patches with {} channels; dataset has patch {} and {} channels",
            enc.patch, enc.patch, enc.channels, data.info.patch, data.info.image_shape[2]
        )));
    }
    let longest = data.queries.iter().map(|q| q.tokens.len()).max().unwrap_or(0);
    if longest > enc.max_len {
        return Err(Error::invalid(format!(
            "dataset has texts of {longest} tokens; model max_len is {}",
            enc.max_len
        )));
    }
    Ok(())
}
