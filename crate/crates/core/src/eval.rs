//! Retrieval and Recall@K.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

pub const REPORTED_K: [usize; 3] = [1, 10, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub loss_curve: Vec<f64>,
}

/// Gallery positions sorted by descending dot product with `query` (cosine
/// for unit vectors); ties keep gallery order.
pub fn rank(query: &Tensor, gallery: &[Tensor]) -> Vec<usize> {
    let scores: Vec<f64> = gallery
        .iter()
        .map(|g| g.data().iter().zip(query.data()).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Gallery image ids ranked for one composed query.
pub fn retrieve(
    model: &Model,
    reference: &PatchGrid,
    text: &TokenSequence,
    gallery: &[(usize, PatchGrid)],
) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let q = model.query_embedding(reference, text)?;
    let embs = gallery
        .iter()
        .map(|(_, g)| model.target_embedding(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(&q, &embs).into_iter().map(|i| gallery[i].0).collect())
}

/// Fraction of queries whose truth is among the first `k` entries of its
/// ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("K must be >= 1"));
    }
    if rankings.len() != truths.len() || rankings.is_empty() {
        return Err(Error::invalid(format!(
            "{} rankings for {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|x| x == *t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Rankings over the split's gallery for every query of the split, paired
/// with the true target ids.
pub fn rankings(model: &Model, data: &Dataset, split: Split) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    crate::config::check_compatible(&model.config, data)?;
    let grids = data.patch_grids()?;
    let gallery = data.gallery(split)?;
    let embs = gallery
        .iter()
        .map(|&i| model.target_embedding(&grids[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut ranks = Vec::new();
    let mut truths = Vec::new();
    for q in data.queries_of(split)? {
        let e = model.query_embedding(&grids[q.reference_id], &q.text)?;
        ranks.push(rank(&e, &embs).into_iter().map(|i| gallery[i]).collect());
        truths.push(q.target_id);
    }
    Ok((ranks, truths))
}

pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<Metrics> {
    let (ranks, truths) = rankings(model, data, split)?;
    let mut recall = BTreeMap::new();
    for k in REPORTED_K {
        recall.insert(k, recall_at_k(&ranks, &truths, k)?);
    }
    Ok(Metrics {
        recall_at_k: recall,
        loss_curve: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_cases() {
        let r = vec![vec![5, 6, 7, 8]];
        assert_eq!(recall_at_k(&r, &[7], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &[7], 10).unwrap(), 1.0);
        assert!(recall_at_k(&r, &[7], 0).is_err());
    }

    #[test]
    fn rank_ties_keep_order() {
        let q = Tensor::vector(vec![1.0, 0.0]);
        let g = vec![
            Tensor::vector(vec![0.0, 1.0]),
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0]),
        ];
        assert_eq!(rank(&q, &g), vec![1, 0, 2]);
    }
}
