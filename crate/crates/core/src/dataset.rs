//! On-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! - `vocab.txt`: `token index POS` per line;
//! - `images.btsr`: every image stacked into one `[n, H, W, C]` tensor;
//! - `manifest.jsonl`: one query per line (`query_id`, `split`,
//!   `reference_id`, `target_id`, `text`, `tokens`);
//! - `dataset.json`: image shape, patch size, per-split galleries, and the
//!   generating spec when synthetic;
//! - `counterfactuals.jsonl`: the mining sidecar, once mined.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{patchify, PatchGrid};
use crate::error::{Error, Result};
use crate::miner::{read_sidecar, write_sidecar, CounterfactualSet, Query};
use crate::synthetic::SyntheticSpec;
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGES_FILE: &str = "images.btsr";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";
pub const SIDECAR_FILE: &str = "counterfactuals.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub query_id: usize,
    pub split: Split,
    pub reference_id: usize,
    pub target_id: usize,
    pub text: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub image_shape: [usize; 3],
    pub patch: usize,
    pub galleries: BTreeMap<Split, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub images: Vec<Tensor>,
    pub queries: Vec<ManifestEntry>,
    pub info: DatasetInfo,
}

impl Dataset {
    pub fn split_queries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn gallery(&self, split: Split) -> Result<&[usize]> {
        self.info
            .galleries
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("dataset has no {split} gallery")))
    }

    pub fn query(&self, e: &ManifestEntry) -> Result<Query> {
        Ok(Query {
            id: e.query_id,
            reference_id: e.reference_id,
            target_id: e.target_id,
            text: TokenSequence::new(e.tokens.clone(), &self.vocab)?,
        })
    }

    pub fn queries_of(&self, split: Split) -> Result<Vec<Query>> {
        self.split_queries(split).map(|e| self.query(e)).collect()
    }

    /// Every image cut into patches, indexed by image id.
    pub fn patch_grids(&self) -> Result<Vec<PatchGrid>> {
        self.images.iter().map(|im| patchify(im, self.info.patch)).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.images.len();
        for (i, q) in self.queries.iter().enumerate() {
            if q.query_id != i {
                return Err(Error::format("manifest", format!("query id {} on line {i}", q.query_id)));
            }
            if q.reference_id >= n || q.target_id >= n {
                return Err(Error::format(
                    "manifest",
                    format!("query {i} references an image outside 0..{n}"),
                ));
            }
            TokenSequence::new(q.tokens.clone(), &self.vocab)?;
        }
        for (split, ids) in &self.info.galleries {
            if ids.iter().any(|&i| i >= n) {
                return Err(Error::format("dataset info", format!("{split} gallery id out of range")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_file_string())?;

        let [h, w, c] = self.info.image_shape;
        let mut flat = Vec::with_capacity(self.images.len() * h * w * c);
        for im in &self.images {
            if im.shape() != [h, w, c] {
                return Err(Error::shape("dataset image", im.shape(), &[h, w, c]));
            }
            flat.extend_from_slice(im.data());
        }
        Tensor::new(vec![self.images.len(), h, w, c], flat)?.save(dir.join(IMAGES_FILE))?;

        let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        for q in &self.queries {
            serde_json::to_writer(&mut m, q)?;
            m.write_all(b"\n")?;
        }
        m.flush()?;

        let mut info = serde_json::to_string_pretty(&self.info)?;
        info.push('\n');
        fs::write(dir.join(INFO_FILE), info)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::parse(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let info: DatasetInfo = serde_json::from_str(&fs::read_to_string(dir.join(INFO_FILE))?)?;
        let stacked = Tensor::load(dir.join(IMAGES_FILE))?;
        let [h, w, c] = info.image_shape;
        if stacked.rank() != 4 || stacked.shape()[1..] != [h, w, c] {
            return Err(Error::format(
                "images",
                format!("expected [n, {h}, {w}, {c}], got {:?}", stacked.shape()),
            ));
        }
        let per = h * w * c;
        let images = stacked
            .data()
            .chunks(per)
            .map(|chunk| Tensor::from_parts(vec![h, w, c], chunk.to_vec()))
            .collect();
        let mut queries = Vec::new();
        for line in fs::read_to_string(dir.join(MANIFEST_FILE))?.lines() {
            if !line.trim().is_empty() {
                queries.push(serde_json::from_str(line)?);
            }
        }
        let d = Self {
            vocab,
            images,
            queries,
            info,
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn sidecar_path(dir: &Path) -> std::path::PathBuf {
    dir.join(SIDECAR_FILE)
}

pub fn save_counterfactuals(dir: &Path, sets: &[CounterfactualSet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(sidecar_path(dir))?);
    write_sidecar(sets, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads the sidecar, keyed by query id.
pub fn load_counterfactuals(dir: &Path) -> Result<BTreeMap<usize, CounterfactualSet>> {
    let path = sidecar_path(dir);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "mining sidecar {} not found; run `mine` first or enable inline mining",
            path.display()
        )));
    }
    let sets = read_sidecar(BufReader::new(File::open(path)?))?;
    Ok(sets.into_iter().map(|s| (s.query_id, s)).collect())
}
