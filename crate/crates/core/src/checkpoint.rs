//! Single-file checkpoints: the parameter archive with the run's config,
//! epoch, shuffle-RNG position and loss curve in its metadata block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

const KIND: &str = "cir-checkpoint";

/// Position of a ChaCha8 stream. `word_pos` is a decimal string because it
/// is a 128-bit counter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub loss_curve: Vec<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(Meta {
            kind: KIND.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            loss_curve: self.loss_curve.clone(),
        })?;
        let mut buf = Vec::new();
        self.params.write_archive(&meta, &mut buf)?;
        Ok(buf)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = ParamStore::read_archive(BufReader::new(File::open(path)?))?;
        let meta: Meta = serde_json::from_value(meta)?;
        if meta.kind != KIND {
            return Err(Error::format("checkpoint", format!("unexpected kind {:?}", meta.kind)));
        }
        let ck = Self {
            params,
            config: meta.config,
            epoch: meta.epoch,
            rng: meta.rng,
            loss_curve: meta.loss_curve,
        };
        ck.model()?;
        Ok(ck)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
