//! The full retrieval model: encoders, composition blocks, and the
//! reconstruction heads, over one named parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PyramidConfig;
use crate::autodiff::{Graph, Var};
use crate::composition::{compose_local, compose_query, composition_specs, fuse_target, ComposedEmbedding};
use crate::encoders::{text_encode, text_specs, visual_encode, visual_specs, EncoderConfig, FeatureBundle, PatchGrid};
use crate::error::{Error, Result};
use crate::losses::{reconstruction_heads, reconstruction_specs};
use crate::params::{ParamSpec, ParamStore, Session};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Largest pyramid window index `N_p`; 1 disables pyramid pooling.
    pub pyramid_levels: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pyramid_levels: 3,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pyramid_levels < 1 {
            return Err(Error::invalid("pyramid_levels must be >= 1"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, std) = (self.encoder.d, self.init_std);
        let mut v = visual_specs(&self.encoder, std);
        v.extend(text_specs(&self.encoder, std));
        v.extend(composition_specs(d, std));
        v.extend(reconstruction_specs(d, std));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    /// Wraps an existing store after checking every expected parameter is
    /// present with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in config.param_specs() {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), &spec.shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn heads(&self) -> usize {
        self.config.encoder.heads
    }

    pub fn pyramid(&self, grid: &PatchGrid) -> Result<PyramidConfig> {
        PyramidConfig::new(self.config.pyramid_levels, grid.grid_h, grid.grid_w)
    }

    pub fn encode_image<'g>(&self, s: &Session<'g>, grid: &PatchGrid) -> Result<FeatureBundle<'g>> {
        visual_encode(s, grid, &self.config.encoder, self.config.pyramid_levels)
    }

    pub fn encode_text<'g>(&self, s: &Session<'g>, tokens: &TokenSequence) -> Result<FeatureBundle<'g>> {
        text_encode(s, tokens, &self.config.encoder)
    }

    pub fn compose<'g>(
        &self,
        s: &Session<'g>,
        reference: &FeatureBundle<'g>,
        grid: &PatchGrid,
        text: &FeatureBundle<'g>,
    ) -> Result<ComposedEmbedding<'g>> {
        compose_query(s, self.heads(), reference, self.pyramid(grid)?, text)
    }

    pub fn compose_local_only<'g>(
        &self,
        s: &Session<'g>,
        reference: &FeatureBundle<'g>,
        grid: &PatchGrid,
        text: &FeatureBundle<'g>,
    ) -> Result<ComposedEmbedding<'g>> {
        compose_local(s, self.heads(), reference, self.pyramid(grid)?, text)
    }

    pub fn fuse<'g>(
        &self,
        s: &Session<'g>,
        target: &FeatureBundle<'g>,
        grid: &PatchGrid,
    ) -> Result<ComposedEmbedding<'g>> {
        fuse_target(s, self.heads(), target, self.pyramid(grid)?)
    }

    /// Visual and textual reconstructions of a pooled composed query.
    pub fn reconstruct<'g>(&self, s: &Session<'g>, pooled_query: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        reconstruction_heads(s, pooled_query)
    }

    /// Pooled composed-query embedding, evaluated without gradients.
    pub fn query_embedding(&self, reference: &PatchGrid, text: &TokenSequence) -> Result<Tensor> {
        let g = Graph::new();
        let s = Session::frozen(&g, &self.params);
        let r = self.encode_image(&s, reference)?;
        let t = self.encode_text(&s, text)?;
        Ok(self.compose(&s, &r, reference, &t)?.pool()?.value())
    }

    /// Pooled fused target embedding, evaluated without gradients.
    pub fn target_embedding(&self, image: &PatchGrid) -> Result<Tensor> {
        let g = Graph::new();
        let s = Session::frozen(&g, &self.params);
        let b = self.encode_image(&s, image)?;
        Ok(self.fuse(&s, &b, image)?.pool()?.value())
    }

    /// Pooled global text embedding, evaluated without gradients.
    pub fn text_embedding(&self, text: &TokenSequence) -> Result<Tensor> {
        let g = Graph::new();
        let s = Session::frozen(&g, &self.params);
        Ok(crate::composition::pool(self.encode_text(&s, text)?.global)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: 8,
                heads: 2,
                patch: 2,
                vocab_size: 6,
                max_len: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Model::new(small(), 3).unwrap(), Model::new(small(), 3).unwrap());
        assert_ne!(Model::new(small(), 3).unwrap(), Model::new(small(), 4).unwrap());
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::new(small(), 1).unwrap();
        let mut bigger = small();
        bigger.encoder.d = 16;
        bigger.encoder.heads = 4;
        assert!(Model::from_params(bigger, m.params.clone()).is_err());
        assert!(Model::from_params(small(), m.params).is_ok());
    }

    #[test]
    fn embeddings_are_unit_vectors() {
        let m = Model::new(small(), 2).unwrap();
        let img = Tensor::new(vec![4, 4, 3], (0..48).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let grid = crate::encoders::patchify(&img, 2).unwrap();
        let text = TokenSequence::from_ids_unchecked(vec![0, 2, 3, 1]);
        for e in [m.query_embedding(&grid, &text).unwrap(), m.target_embedding(&grid).unwrap()] {
            let n: f64 = e.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
