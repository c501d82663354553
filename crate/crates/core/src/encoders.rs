//! Two-level (local, global) image and text representations.
//!
//! Both encoders are small post-norm transformer stacks. The local features
//! come from the first layer and the global features from the last one.

use serde::{Deserialize, Serialize};

use crate::attention::{msa, psa, AttentionParams, PyramidConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{
    feed_forward, feed_forward_specs, layer_norm, layer_norm_specs, linear, linear_specs,
};
use crate::params::{Init, ParamSpec, Session};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d: 32,
            heads: 4,
            patch: 4,
            channels: 3,
            vocab_size: 0,
            max_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid(format!(
                "encoder depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.vocab_size == 0 || self.max_len < 2 {
            return Err(Error::invalid("patch, channels, vocab_size and max_len must be positive"));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Non-overlapping `P × P` patches of an image, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
    /// `[grid_h · grid_w, P·P·C]`
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn flat_index(&self, r: usize, c: usize) -> usize {
        r * self.grid_w + c
    }

    /// Reassembles the `[H, W, C]` image.
    pub fn unpatchify(&self) -> Tensor {
        let (p, ch) = (self.patch, self.channels);
        let (h, w) = (self.grid_h * p, self.grid_w * p);
        let mut out = vec![0.0; h * w * ch];
        for gr in 0..self.grid_h {
            for gc in 0..self.grid_w {
                let row = self.patches.row(self.flat_index(gr, gc));
                let mut k = 0;
                for pr in 0..p {
                    for pc in 0..p {
                        for c in 0..ch {
                            out[((gr * p + pr) * w + gc * p + pc) * ch + c] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![h, w, ch], out)
    }
}

/// Splits an `[H, W, C]` image into `P × P` patches; each patch is the
/// row-major flattening of its `P × P × C` block.
pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchGrid> {
    let [h, w, ch] = image.shape() else {
        return Err(Error::invalid(format!(
            "image must have shape [H, W, C], got {:?}",
            image.shape()
        )));
    };
    let (h, w, ch) = (*h, *w, *ch);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * ch;
    let mut data = Vec::with_capacity(gh * gw * pd);
    let px = image.data();
    for gr in 0..gh {
        for gc in 0..gw {
            for pr in 0..patch {
                let y = gr * patch + pr;
                let start = (y * w + gc * patch) * ch;
                data.extend_from_slice(&px[start..start + patch * ch]);
            }
        }
    }
    Ok(PatchGrid {
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: ch,
        patches: Tensor::from_parts(vec![gh * gw, pd], data),
    })
}

/// Local and global token features of one image or text.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle<'g> {
    pub local: Var<'g>,
    pub global: Var<'g>,
}

impl FeatureBundle<'_> {
    pub fn tokens(&self) -> usize {
        self.local.shape()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.local.value().is_finite() && self.global.value().is_finite()
    }
}

fn layer_specs(prefix: &str, cfg: &EncoderConfig, std: f64) -> Vec<ParamSpec> {
    let mut v = AttentionParams::specs(&format!("{prefix}.attn"), cfg.d, std);
    v.extend(layer_norm_specs(&format!("{prefix}.ln1"), cfg.d));
    v.extend(feed_forward_specs(&format!("{prefix}.ffn"), cfg.d, 2 * cfg.d, std));
    v.extend(layer_norm_specs(&format!("{prefix}.ln2"), cfg.d));
    v
}

/// `x ← LN(x + Attn(x)); x ← LN(x + FFN(x))`. Visual layers attend with the
/// pyramid (`pyramid = Some`), text layers with plain self-attention.
fn encoder_layer<'g>(
    s: &Session<'g>,
    prefix: &str,
    heads: usize,
    x: Var<'g>,
    pyramid: Option<&PyramidConfig>,
) -> Result<Var<'g>> {
    let p = AttentionParams::bind(s, &format!("{prefix}.attn"), heads)?;
    let a = match pyramid {
        Some(cfg) => psa(x, &p, cfg)?.0,
        None => msa(x, &p)?,
    };
    let x = layer_norm(s, &format!("{prefix}.ln1"), x.add(a)?)?;
    let f = feed_forward(s, &format!("{prefix}.ffn"), x)?;
    layer_norm(s, &format!("{prefix}.ln2"), x.add(f)?)
}

pub fn visual_specs(cfg: &EncoderConfig, std: f64) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut v = linear_specs("visual.embed", cfg.patch_dim(), d, std);
    for l in 0..cfg.depth {
        v.extend(layer_specs(&format!("visual.layer{l}"), cfg, std));
    }
    v.extend(feed_forward_specs("visual.local_proj", d, d, std));
    v.extend(linear_specs("visual.global_proj", d, d, std));
    v
}

pub fn text_specs(cfg: &EncoderConfig, std: f64) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut v = vec![
        ParamSpec::new("text.token_embed", &[cfg.vocab_size, d], Init::Normal(std)),
        ParamSpec::new("text.pos_embed", &[cfg.max_len, d], Init::Normal(std)),
    ];
    for l in 0..cfg.depth {
        v.extend(layer_specs(&format!("text.layer{l}"), cfg, std));
    }
    v.extend(linear_specs("text.global_proj", d, d, std));
    v
}

/// Local = Linear→gelu→Linear of the first layer's output; global = linear
/// projection of the last layer's output.
pub fn visual_encode<'g>(
    s: &Session<'g>,
    grid: &PatchGrid,
    cfg: &EncoderConfig,
    pyramid_levels: usize,
) -> Result<FeatureBundle<'g>> {
    if grid.patch_dim() != cfg.patch_dim() {
        return Err(Error::shape(
            "visual_encode",
            grid.patches.shape(),
            &[grid.patches.rows(), cfg.patch_dim()],
        ));
    }
    if cfg.depth < 2 {
        return Err(Error::invalid("encoder depth must be >= 2"));
    }
    let pyramid = PyramidConfig::new(pyramid_levels, grid.grid_h, grid.grid_w)?;
    let patches = s.graph().constant(grid.patches.clone());
    let mut x = linear(s, "visual.embed", patches)?;
    let mut first = None;
    for l in 0..cfg.depth {
        x = encoder_layer(s, &format!("visual.layer{l}"), cfg.heads, x, Some(&pyramid))?;
        first.get_or_insert(x);
    }
    let first = first.expect("depth >= 2");
    Ok(FeatureBundle {
        local: feed_forward(s, "visual.local_proj", first)?,
        global: linear(s, "visual.global_proj", x)?,
    })
}

/// Local = first layer's output plus the position-aware input embeddings;
/// global = linear projection of the last layer's output.
pub fn text_encode<'g>(
    s: &Session<'g>,
    tokens: &TokenSequence,
    cfg: &EncoderConfig,
) -> Result<FeatureBundle<'g>> {
    let ids = tokens.ids();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {} outside 1..={}",
            ids.len(),
            cfg.max_len
        )));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = s.param("text.token_embed")?.gather_rows(ids)?;
    let pos = s.param("text.pos_embed")?.gather_rows(&positions)?;
    let x0 = tok.add(pos)?;
    let mut x = x0;
    let mut first = None;
    for l in 0..cfg.depth {
        x = encoder_layer(s, &format!("text.layer{l}"), cfg.heads, x, None)?;
        first.get_or_insert(x);
    }
    let first = first.expect("depth >= 2");
    Ok(FeatureBundle {
        local: first.add(x0)?,
        global: linear(s, "text.global_proj", x)?,
    })
}
