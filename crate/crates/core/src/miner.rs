//! Counterfactual negatives for each training query:
//!
//! - ICS: the query's reference image with the least similar corpus texts;
//! - TCS: the reference images of the least similar texts with the query's
//!   own text;
//! - PCS: the query's reference image with texts whose adjectives and nouns
//!   were all replaced by other words of the same part of speech, keeping the
//!   candidates most similar to the original.
//!
//! Mining is deterministic: PCS sampling draws from a ChaCha8 stream keyed by
//! `(seed, query id)`, so results do not depend on processing order.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vocab::{Pos, TokenSequence, Vocabulary};

/// Texts closer than this to a query's text count as duplicates of it.
pub const DUPLICATE_SIMILARITY: f64 = 1.0 - 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningEncoder {
    /// The text encoder's current parameters (re-mining during training).
    Live,
    /// The text encoder as initialized, before any training step.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub k_q: usize,
    pub k_r: usize,
    pub k_1: usize,
    pub k_2: usize,
    pub seed: u64,
    pub mining_encoder: MiningEncoder,
    pub remine_each_epoch: bool,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            k_q: 3,
            k_r: 3,
            k_1: 16,
            k_2: 3,
            seed: 0,
            mining_encoder: MiningEncoder::Frozen,
            remine_each_epoch: false,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_q == 0 || self.k_r == 0 || self.k_1 == 0 || self.k_2 == 0 {
            return Err(Error::invalid("K_q, K_r, K_1 and K_2 must be positive"));
        }
        if self.k_2 > self.k_1 {
            return Err(Error::invalid(format!(
                "K_2 = {} exceeds K_1 = {}",
                self.k_2, self.k_1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: usize,
    pub reference_id: usize,
    pub target_id: usize,
    pub text: TokenSequence,
}

/// Mined negatives for one query, in the sidecar's record layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub query_id: usize,
    /// Corpus query ids whose texts pair with this query's reference image.
    pub ics_text_ids: Vec<usize>,
    /// Image ids that pair with this query's text.
    pub tcs_image_ids: Vec<usize>,
    /// Token ids of the context-preserving texts.
    pub pcs_texts: Vec<Vec<usize>>,
    /// Set when fewer than `K_2` distinct PCS candidates existed.
    #[serde(skip)]
    pub pcs_short: bool,
}

/// Anything that maps a text to a vector; similarity is the cosine between
/// two such vectors.
pub trait TextEmbedder {
    fn embed(&self, text: &TokenSequence) -> Result<Tensor>;
}

impl TextEmbedder for Model {
    fn embed(&self, text: &TokenSequence) -> Result<Tensor> {
        self.text_embedding(text)
    }
}

pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cosine", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn text_similarity<E: TextEmbedder + ?Sized>(
    a: &TokenSequence,
    b: &TokenSequence,
    encoder: &E,
) -> Result<f64> {
    if a == b {
        return Ok(1.0);
    }
    cosine(&encoder.embed(a)?, &encoder.embed(b)?)
}

/// Replacement pools per part of speech.
#[derive(Clone, Debug, PartialEq)]
pub struct PosLexicon {
    pos: Vec<Pos>,
    pools: BTreeMap<Pos, Vec<usize>>,
}

impl PosLexicon {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        let pos: Vec<Pos> = (0..vocab.len()).map(|i| vocab.pos(i).expect("in range")).collect();
        let mut pools: BTreeMap<Pos, Vec<usize>> = BTreeMap::new();
        for (i, p) in pos.iter().enumerate() {
            pools.entry(*p).or_default().push(i);
        }
        for p in [Pos::Adjective, Pos::Noun] {
            if !pools.contains_key(&p) {
                return Err(Error::invalid(format!("vocabulary has no {p} tokens")));
            }
        }
        Ok(Self { pos, pools })
    }

    pub fn pos(&self, id: usize) -> Option<Pos> {
        self.pos.get(id).copied()
    }

    pub fn pool(&self, pos: Pos) -> &[usize] {
        self.pools.get(&pos).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Positions (in the full id sequence) holding an adjective or noun.
    pub fn maskable_positions(&self, text: &TokenSequence) -> Vec<usize> {
        let ids = text.ids();
        (1..ids.len().saturating_sub(1))
            .filter(|&i| self.pos(ids[i]).is_some_and(Pos::is_attribute))
            .collect()
    }
}

/// Embeddings of every corpus text, computed once.
pub struct CorpusIndex {
    embeddings: Vec<Tensor>,
}

impl CorpusIndex {
    pub fn build<E: TextEmbedder + ?Sized>(corpus: &[Query], encoder: &E) -> Result<Self> {
        let embeddings = corpus
            .iter()
            .map(|q| encoder.embed(&q.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embeddings })
    }

    pub fn embedding(&self, i: usize) -> &Tensor {
        &self.embeddings[i]
    }
}

/// Corpus positions other than `q_pos`, by ascending similarity to it (ties
/// by position), with their similarities.
pub fn rank_by_dissimilarity(index: &CorpusIndex, q_pos: usize) -> Result<Vec<(usize, f64)>> {
    let me = index.embedding(q_pos);
    let mut ranked = Vec::with_capacity(index.embeddings.len());
    for (i, e) in index.embeddings.iter().enumerate() {
        if i != q_pos {
            ranked.push((i, cosine(me, e)?));
        }
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// ICS text ids and TCS image ids for the query at corpus position `q_pos`.
///
/// Candidates whose text duplicates the query's (similarity ≥ 1 − 1e-9) are
/// never used. TCS skips images equal to the query's own reference (which
/// would recreate the positive pair) and images already chosen.
pub fn mine_ics_tcs(
    corpus: &[Query],
    q_pos: usize,
    index: &CorpusIndex,
    cfg: &MinerConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let q = &corpus[q_pos];
    let need = cfg.k_q.max(cfg.k_r);
    if corpus.len() <= need {
        return Err(Error::DegenerateCorpus(format!(
            "corpus of {} queries is too small for K_q = {}, K_r = {}",
            corpus.len(),
            cfg.k_q,
            cfg.k_r
        )));
    }
    let ranked: Vec<usize> = rank_by_dissimilarity(index, q_pos)?
        .into_iter()
        .filter(|&(_, s)| s < DUPLICATE_SIMILARITY)
        .map(|(i, _)| i)
        .collect();
    if ranked.len() < need {
        return Err(Error::DegenerateCorpus(format!(
            "query {} has only {} non-duplicate texts in the corpus; {need} required",
            q.id,
            ranked.len()
        )));
    }
    let ics = ranked[..cfg.k_q].iter().map(|&i| corpus[i].id).collect();
    let mut tcs = Vec::with_capacity(cfg.k_r);
    for &i in &ranked {
        let img = corpus[i].reference_id;
        if img != q.reference_id && !tcs.contains(&img) {
            tcs.push(img);
            if tcs.len() == cfg.k_r {
                break;
            }
        }
    }
    if tcs.len() < cfg.k_r {
        return Err(Error::DegenerateCorpus(format!(
            "query {} has only {} distinct other reference images among dissimilar texts",
            q.id,
            tcs.len()
        )));
    }
    Ok((ics, tcs))
}

/// The `K_1` raw PCS candidates (before dedupe), drawn from the query's own
/// random stream.
pub fn pcs_candidates(q: &Query, lex: &PosLexicon, cfg: &MinerConfig) -> Result<Vec<TokenSequence>> {
    let positions = lex.maskable_positions(&q.text);
    if positions.is_empty() {
        return Err(Error::NoMaskablePosition {
            tokens: q.text.ids().to_vec(),
        });
    }
    let ids = q.text.ids();
    let mut pools = Vec::with_capacity(positions.len());
    for &p in &positions {
        let pos = lex.pos(ids[p]).expect("maskable position has a POS");
        let pool: Vec<usize> = lex.pool(pos).iter().copied().filter(|&t| t != ids[p]).collect();
        if pool.is_empty() {
            return Err(Error::NoMaskableReplacement {
                position: p,
                token: ids[p],
            });
        }
        pools.push(pool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(q.id as u64);
    let mut out = Vec::with_capacity(cfg.k_1);
    for _ in 0..cfg.k_1 {
        let mut c = ids.to_vec();
        for (&p, pool) in positions.iter().zip(&pools) {
            c[p] = pool[rng.random_range(0..pool.len())];
        }
        out.push(TokenSequence::from_ids_unchecked(c));
    }
    Ok(out)
}

/// Deduplicated candidates ranked by similarity to the original text
/// (descending, ties by first appearance); the top `K_2` are kept. The flag
/// is set when fewer than `K_2` distinct candidates exist.
pub fn mine_pcs<E: TextEmbedder + ?Sized>(
    q: &Query,
    lex: &PosLexicon,
    cfg: &MinerConfig,
    encoder: &E,
) -> Result<(Vec<TokenSequence>, bool)> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    let unique: Vec<TokenSequence> = pcs_candidates(q, lex, cfg)?
        .into_iter()
        .filter(|c| seen.insert(c.clone()))
        .collect();
    let original = encoder.embed(&q.text)?;
    let mut scored = Vec::with_capacity(unique.len());
    for (i, c) in unique.into_iter().enumerate() {
        let s = cosine(&original, &encoder.embed(&c)?)?;
        scored.push((i, s, c));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = scored.len() < cfg.k_2;
    Ok((scored.into_iter().take(cfg.k_2).map(|(_, _, c)| c).collect(), short))
}

/// Mines every query of `corpus` against the rest of it. Output is in corpus
/// order.
pub fn mine_corpus<E: TextEmbedder + ?Sized>(
    corpus: &[Query],
    vocab: &Vocabulary,
    cfg: &MinerConfig,
    encoder: &E,
) -> Result<Vec<CounterfactualSet>> {
    cfg.validate()?;
    let lex = PosLexicon::from_vocab(vocab)?;
    let index = CorpusIndex::build(corpus, encoder)?;
    let mut out = Vec::with_capacity(corpus.len());
    for (pos, q) in corpus.iter().enumerate() {
        let (ics, tcs) = mine_ics_tcs(corpus, pos, &index, cfg)?;
        let (pcs, short) = mine_pcs(q, &lex, cfg, encoder)?;
        out.push(CounterfactualSet {
            query_id: q.id,
            ics_text_ids: ics,
            tcs_image_ids: tcs,
            pcs_texts: pcs.into_iter().map(|t| t.ids().to_vec()).collect(),
            pcs_short: short,
        });
    }
    Ok(out)
}

/// One JSON record per line, sorted by query id.
pub fn write_sidecar<W: Write>(sets: &[CounterfactualSet], mut w: W) -> Result<()> {
    let mut sorted: Vec<&CounterfactualSet> = sets.iter().collect();
    sorted.sort_by_key(|s| s.query_id);
    for s in sorted {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sidecar<R: BufRead>(r: R) -> Result<Vec<CounterfactualSet>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
