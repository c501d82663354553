//! Training loop: AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::composition::pool;
use crate::config::TrainConfig;
use crate::dataset::{Dataset, Split};
use crate::encoders::{FeatureBundle, PatchGrid};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::losses::{total_loss, LossBreakdown, Objective, SampleTerms};
use crate::miner::{mine_corpus, CounterfactualSet, Query};
use crate::model::Model;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;
use crate::Graph;

/// Stream of the batch-order RNG; the model initialization uses stream 0.
const SHUFFLE_STREAM: u64 = 1;

/// Linear warmup from 0 over the first `warmup_fraction` of steps, then
/// cosine decay reaching 0 at the last step.
pub fn learning_rate(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup + 1).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay. Decay applies to matrices only (not to
/// biases or layer-norm scales).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", g.shape(), p.shape()));
            }
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps) + decay * *w;
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
    /// Total loss at every optimizer step.
    pub step_losses: Vec<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints per epoch, `final.ckpt` and `metrics.json` go here.
    pub out_dir: Option<&'a Path>,
    /// Mined counterfactuals keyed by query id; required for the full
    /// objective unless `mine_inline` is set.
    pub counterfactuals: Option<&'a BTreeMap<usize, CounterfactualSet>>,
    /// Stop after this many optimizer steps (the schedule still spans them).
    pub max_steps: Option<usize>,
    /// Split evaluated for the returned metrics.
    pub eval_split: Option<Split>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochReport)>,
}

struct Batch<'a> {
    data: &'a Dataset,
    grids: &'a [PatchGrid],
    texts: &'a BTreeMap<usize, TokenSequence>,
    counterfactuals: Option<&'a BTreeMap<usize, CounterfactualSet>>,
}

impl Batch<'_> {
    fn loss<'g>(
        &self,
        model: &Model,
        s: &Session<'g>,
        queries: &[&Query],
        cfg: &TrainConfig,
    ) -> Result<LossBreakdown<'g>> {
        let mut images: BTreeMap<usize, FeatureBundle<'g>> = BTreeMap::new();
        let mut image = |id: usize| -> Result<FeatureBundle<'g>> {
            if let Some(b) = images.get(&id) {
                return Ok(*b);
            }
            let b = model.encode_image(s, &self.grids[id])?;
            images.insert(id, b);
            Ok(b)
        };
        let mut samples = Vec::with_capacity(queries.len());
        for q in queries {
            let grid = &self.grids[q.reference_id];
            let reference = image(q.reference_id)?;
            let text = model.encode_text(s, &q.text)?;
            let query = model.compose(s, &reference, grid, &text)?.pool()?;
            let target_bundle = image(q.target_id)?;
            let target = model.fuse(s, &target_bundle, &self.grids[q.target_id])?.pool()?;
            let target_global = pool(target_bundle.global)?;
            let mut counterfactuals = Vec::new();
            if cfg.objective == Objective::Full {
                let set = self
                    .counterfactuals
                    .and_then(|m| m.get(&q.id))
                    .ok_or_else(|| Error::invalid(format!("no counterfactuals mined for query {}", q.id)))?;
                for id in &set.ics_text_ids {
                    let t = self
                        .texts
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("ICS text {id} is not a training query")))?;
                    let tb = model.encode_text(s, t)?;
                    counterfactuals.push(model.compose(s, &reference, grid, &tb)?.pool()?);
                }
                for &img in &set.tcs_image_ids {
                    let rb = image(img)?;
                    counterfactuals.push(model.compose(s, &rb, &self.grids[img], &text)?.pool()?);
                }
                for ids in &set.pcs_texts {
                    let t = TokenSequence::new(ids.clone(), &self.data.vocab)?;
                    let tb = model.encode_text(s, &t)?;
                    counterfactuals.push(model.compose(s, &reference, grid, &tb)?.pool()?);
                }
            }
            let (recon_image, recon_text) = model.reconstruct(s, query)?;
            samples.push(SampleTerms {
                query,
                target,
                target_global,
                counterfactuals,
                recon_image,
                recon_text,
            });
        }
        total_loss(&samples, cfg.objective, &cfg.weights, &cfg.margins, &cfg.sinkhorn)
    }
}

fn rng_state(rng: &ChaCha8Rng, seed: u64) -> RngState {
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

/// Mines the training split with the given model's text encoder.
pub fn mine_training_split(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<CounterfactualSet>> {
    mine_corpus(&data.queries_of(Split::Train)?, &data.vocab, &cfg.miner, model)
}

pub fn train(mut cfg: TrainConfig, data: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.bind_dataset(data)?;
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let grids = data.patch_grids()?;
    let train_queries = data.queries_of(Split::Train)?;
    if train_queries.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "{} training queries cannot fill a batch of {}",
            train_queries.len(),
            cfg.batch_size
        )));
    }
    let texts: BTreeMap<usize, TokenSequence> = train_queries.iter().map(|q| (q.id, q.text.clone())).collect();

    let mut owned_cf: Option<BTreeMap<usize, CounterfactualSet>> = None;
    let needs_cf = cfg.objective == Objective::Full;
    if needs_cf && opts.counterfactuals.is_none() {
        if !cfg.mine_inline {
            return Err(Error::invalid(
                "counterfactual sidecar missing and inline mining is disabled",
            ));
        }
        owned_cf = Some(
            mine_training_split(&model, data, &cfg)?
                .into_iter()
                .map(|s| (s.query_id, s))
                .collect(),
        );
    }

    let steps_per_epoch = train_queries.len() / cfg.batch_size;
    let scheduled = steps_per_epoch * cfg.max_epochs;
    let total_steps = opts.max_steps.map_or(scheduled, |m| m.min(scheduled));
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_queries.len()).collect();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut loss_curve = Vec::new();
    let mut step = 0;
    let mut epoch = 0;

    while step < total_steps {
        if epoch > 0 && needs_cf && cfg.miner.remine_each_epoch {
            owned_cf = Some(
                mine_training_split(&model, data, &cfg)?
                    .into_iter()
                    .map(|s| (s.query_id, s))
                    .collect(),
            );
        }
        let batcher = Batch {
            data,
            grids: &grids,
            texts: &texts,
            counterfactuals: owned_cf.as_ref().or(opts.counterfactuals),
        };
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let batch: Vec<&Query> = chunk.iter().map(|&i| &train_queries[i]).collect();
            let g = Graph::new();
            let s = Session::new(&g, &model.params);
            let loss = batcher.loss(&model, &s, &batch, &cfg)?;
            let value = loss.total.item();
            if !value.is_finite() {
                let ids: Vec<usize> = batch.iter().map(|q| q.id).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    dump: format!(
                        "epoch {epoch}, queries {ids:?}, triplet {}, reconstruct {}, alignment {}",
                        loss.triplet, loss.reconstruct, loss.alignment
                    ),
                });
            }
            g.backward(loss.total)?;
            let grads = s.grads();
            drop(s);
            let lr = learning_rate(step, total_steps, cfg.learning_rate, cfg.warmup_fraction);
            opt.step(&mut model.params, &grads, lr)?;
            step_losses.push(value);
            epoch_sum += value;
            epoch_steps += 1;
            step += 1;
        }
        epoch += 1;
        let mean_loss = epoch_sum / epoch_steps.max(1) as f64;
        loss_curve.push(mean_loss);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&EpochReport {
                epoch,
                mean_loss,
                steps: step,
            });
        }
        if let Some(dir) = opts.out_dir {
            let ck = Checkpoint {
                params: model.params.clone(),
                config: cfg.clone(),
                epoch,
                rng: rng_state(&rng, cfg.seed),
                loss_curve: loss_curve.clone(),
            };
            ck.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
    }

    let checkpoint = Checkpoint {
        params: model.params.clone(),
        config: cfg.clone(),
        epoch,
        rng: rng_state(&rng, cfg.seed),
        loss_curve: loss_curve.clone(),
    };
    let mut metrics = evaluate(&model, data, opts.eval_split.unwrap_or(Split::Test))?;
    metrics.loss_curve = loss_curve;
    if let Some(dir) = opts.out_dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
        let mut json = serde_json::to_string_pretty(&metrics)?;
        json.push('\n');
        std::fs::write(dir.join("metrics.json"), json)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        metrics,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert_eq!(learning_rate(0, total, 1.0, 0.1), 0.0);
        assert_eq!(learning_rate(10, total, 1.0, 0.1), 1.0);
        assert!(learning_rate(99, total, 1.0, 0.1) < 1e-3);
        assert_eq!(learning_rate(0, total, 1.0, 0.0), 1.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        AdamW::new(0.9, 0.999, 1e-8, 0.01).step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }
}
