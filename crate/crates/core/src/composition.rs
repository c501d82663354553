//! Cross-modal modification (CRM), absorbing composition (RAC), and the
//! three-stage local-to-global query composition.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, msa, pca, psa, soa, soa_specs, AttentionParams, PyramidConfig};
use crate::autodiff::{concat, Var};
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::layers::{feed_forward, feed_forward_specs, layer_norm, layer_norm_specs, linear, linear_specs};
use crate::params::{ParamSpec, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Visual,
    Textual,
}

/// A token matrix together with its modality. Visual tokens carry the patch
/// grid that pyramid pooling interprets them on.
#[derive(Clone, Copy, Debug)]
pub enum Tagged<'g> {
    Visual { tokens: Var<'g>, pyramid: PyramidConfig },
    Textual(Var<'g>),
}

impl<'g> Tagged<'g> {
    pub fn visual(tokens: Var<'g>, pyramid: PyramidConfig) -> Result<Self> {
        let n = tokens.shape()[0];
        if n != pyramid.tokens() {
            return Err(Error::invalid(format!(
                "{n} visual tokens do not fit a {}x{} grid",
                pyramid.grid_h, pyramid.grid_w
            )));
        }
        Ok(Tagged::Visual { tokens, pyramid })
    }

    pub fn textual(tokens: Var<'g>) -> Self {
        Tagged::Textual(tokens)
    }

    pub fn tokens(&self) -> Var<'g> {
        match self {
            Tagged::Visual { tokens, .. } => *tokens,
            Tagged::Textual(t) => *t,
        }
    }

    pub fn tag(&self) -> ModalityTag {
        match self {
            Tagged::Visual { .. } => ModalityTag::Visual,
            Tagged::Textual(_) => ModalityTag::Textual,
        }
    }

    fn with_tokens(&self, tokens: Var<'g>) -> Self {
        match self {
            Tagged::Visual { pyramid, .. } => Tagged::Visual {
                tokens,
                pyramid: *pyramid,
            },
            Tagged::Textual(_) => Tagged::Textual(tokens),
        }
    }

    fn shape(&self) -> Vec<usize> {
        self.tokens().shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LocalComposition,
    Absorbing,
    GlobalComposition,
    TargetFusion,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::LocalComposition => "local_composition",
            Stage::Absorbing => "absorbing",
            Stage::GlobalComposition => "global_composition",
            Stage::TargetFusion => "target_fusion",
        })
    }
}

/// Output of one composition stage; always lives on the reference (or
/// target) image's patch grid.
#[derive(Clone, Copy, Debug)]
pub struct ComposedEmbedding<'g> {
    pub tokens: Var<'g>,
    pub stage: Stage,
    pub pyramid: PyramidConfig,
}

impl<'g> ComposedEmbedding<'g> {
    pub fn as_visual(&self) -> Tagged<'g> {
        Tagged::Visual {
            tokens: self.tokens,
            pyramid: self.pyramid,
        }
    }

    /// Mean over tokens, then L2-normalized.
    pub fn pool(&self) -> Result<Var<'g>> {
        pool(self.tokens)
    }
}

/// Mean over the token axis of `[N, d]`, L2-normalized to a `[d]` vector.
pub fn pool<'g>(tokens: Var<'g>) -> Result<Var<'g>> {
    tokens.mean(0)?.normalize()
}

fn check_widths(op: &'static str, a: &Tagged<'_>, b: &Tagged<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

/// `LN(R + PSA(R))` for visual input, `LN(R + MSA(R))` otherwise.
fn self_block<'g>(s: &Session<'g>, prefix: &str, heads: usize, r: &Tagged<'g>) -> Result<Var<'g>> {
    let p = AttentionParams::bind(s, &format!("{prefix}.attn"), heads)?;
    let a = match r {
        Tagged::Visual { tokens, pyramid } => psa(*tokens, &p, pyramid)?.0,
        Tagged::Textual(t) => msa(*t, &p)?,
    };
    layer_norm(s, &format!("{prefix}.ln"), r.tokens().add(a)?)
}

fn self_block_specs(prefix: &str, d: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = AttentionParams::specs(&format!("{prefix}.attn"), d, std);
    v.extend(layer_norm_specs(&format!("{prefix}.ln"), d));
    v
}

/// Queries from `queries`; keys and values from `kv`. Pyramid pooling is
/// applied to the keys only when the key/value side is visual.
fn cross_block<'g>(
    s: &Session<'g>,
    prefix: &str,
    heads: usize,
    queries: Var<'g>,
    kv: &Tagged<'g>,
) -> Result<Var<'g>> {
    let p = AttentionParams::bind(s, prefix, heads)?;
    Ok(match kv {
        Tagged::Visual { tokens, pyramid } => pca(queries, *tokens, &p, pyramid)?.0,
        Tagged::Textual(t) => cross_attention(queries, *t, &p)?.0,
    })
}

pub fn crm_specs(prefix: &str, d: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = self_block_specs(&format!("{prefix}.self_r"), d, std);
    v.extend(self_block_specs(&format!("{prefix}.self_q"), d, std));
    v.extend(AttentionParams::specs(&format!("{prefix}.cross_r"), d, std));
    v.extend(layer_norm_specs(&format!("{prefix}.ln_r"), d));
    v.extend(AttentionParams::specs(&format!("{prefix}.cross_q"), d, std));
    v.extend(layer_norm_specs(&format!("{prefix}.ln_q"), d));
    v.extend(soa_specs(&format!("{prefix}.soa"), d, std));
    v.extend(layer_norm_specs(&format!("{prefix}.ln_out"), d));
    v.extend(feed_forward_specs(&format!("{prefix}.ffn"), d, 2 * d, std));
    v
}

/// Cross-modal representation modification of reference `r_r` by query
/// `r_q`:
///
/// ```text
/// R̂_M = LN(R_M + SelfAttn_M(R_M))                 M ∈ {R, Q}
/// R̄_R = LN(R̂_R + Cross(queries R̂_R, kv R̂_Q))
/// R̄_Q = LN(R̂_Q + Cross(queries R̂_Q, kv R̂_R))
/// R_CC = FFN(LN(R̄_R + SOA(R̄_Q, R̄_R)))
/// ```
///
/// Each residual cross-attention takes its queries from the side it updates,
/// so both outputs keep their input's token count.
pub fn crm<'g>(
    s: &Session<'g>,
    prefix: &str,
    heads: usize,
    r_r: Tagged<'g>,
    r_q: Tagged<'g>,
) -> Result<Var<'g>> {
    check_widths("crm", &r_r, &r_q)?;
    let hat_r = self_block(s, &format!("{prefix}.self_r"), heads, &r_r)?;
    let hat_q = self_block(s, &format!("{prefix}.self_q"), heads, &r_q)?;
    let (hat_r_t, hat_q_t) = (r_r.with_tokens(hat_r), r_q.with_tokens(hat_q));

    let cross_r = cross_block(s, &format!("{prefix}.cross_r"), heads, hat_r, &hat_q_t)?;
    let bar_r = layer_norm(s, &format!("{prefix}.ln_r"), hat_r.add(cross_r)?)?;
    let cross_q = cross_block(s, &format!("{prefix}.cross_q"), heads, hat_q, &hat_r_t)?;
    let bar_q = layer_norm(s, &format!("{prefix}.ln_q"), hat_q.add(cross_q)?)?;

    let gated = soa(s, &format!("{prefix}.soa"), bar_q, bar_r)?;
    let mixed = layer_norm(s, &format!("{prefix}.ln_out"), bar_r.add(gated)?)?;
    feed_forward(s, &format!("{prefix}.ffn"), mixed)
}

pub fn rac_specs(prefix: &str, d: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = self_block_specs(&format!("{prefix}.self_l"), d, std);
    v.extend(self_block_specs(&format!("{prefix}.self_g"), d, std));
    v.extend(AttentionParams::specs(&format!("{prefix}.cross"), d, std));
    v.extend(linear_specs(&format!("{prefix}.transform"), 2 * d, d, std));
    v.extend(layer_norm_specs(&format!("{prefix}.ln_out"), d));
    v.extend(feed_forward_specs(&format!("{prefix}.ffn"), d, 2 * d, std));
    v
}

/// Representation absorbing composition of local `r_l` into global `r_g`:
///
/// ```text
/// R̂_M = LN(R_M + SelfAttn_M(R_M))                 M ∈ {L, G}
/// R̄_G = gelu([Cross(queries R̂_G, kv R̂_L), R̂_G] · W_t + b_t)
/// R_AC = FFN(LN(R̂_G + R̄_G))
/// ```
pub fn rac<'g>(
    s: &Session<'g>,
    prefix: &str,
    heads: usize,
    r_l: Tagged<'g>,
    r_g: Tagged<'g>,
) -> Result<Var<'g>> {
    check_widths("rac", &r_l, &r_g)?;
    let (sl, sg) = (r_l.shape(), r_g.shape());
    if sl[0] != sg[0] {
        return Err(Error::shape("rac token counts", &sl, &sg));
    }
    let hat_l = self_block(s, &format!("{prefix}.self_l"), heads, &r_l)?;
    let hat_g = self_block(s, &format!("{prefix}.self_g"), heads, &r_g)?;
    let attended = cross_block(s, &format!("{prefix}.cross"), heads, hat_g, &r_l.with_tokens(hat_l))?;
    let bar_g = linear(s, &format!("{prefix}.transform"), concat(&[attended, hat_g], 1)?)?.gelu()?;
    let mixed = layer_norm(s, &format!("{prefix}.ln_out"), hat_g.add(bar_g)?)?;
    feed_forward(s, &format!("{prefix}.ffn"), mixed)
}

pub const LOCAL_PREFIX: &str = "compose.local";
pub const ABSORB_PREFIX: &str = "compose.absorb";
pub const GLOBAL_PREFIX: &str = "compose.global";
pub const TARGET_PREFIX: &str = "target.absorb";

pub fn composition_specs(d: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = crm_specs(LOCAL_PREFIX, d, std);
    v.extend(rac_specs(ABSORB_PREFIX, d, std));
    v.extend(crm_specs(GLOBAL_PREFIX, d, std));
    v.extend(rac_specs(TARGET_PREFIX, d, std));
    v
}

/// First stage only: CRM over the local features.
pub fn compose_local<'g>(
    s: &Session<'g>,
    heads: usize,
    reference: &FeatureBundle<'g>,
    pyramid: PyramidConfig,
    query: &FeatureBundle<'g>,
) -> Result<ComposedEmbedding<'g>> {
    let c1 = crm(
        s,
        LOCAL_PREFIX,
        heads,
        Tagged::visual(reference.local, pyramid)?,
        Tagged::textual(query.local),
    )?;
    Ok(ComposedEmbedding {
        tokens: c1,
        stage: Stage::LocalComposition,
        pyramid,
    })
}

/// Local CRM → absorbing RAC with the reference's global features → global
/// CRM with the query text's global features.
pub fn compose_query<'g>(
    s: &Session<'g>,
    heads: usize,
    reference: &FeatureBundle<'g>,
    pyramid: PyramidConfig,
    query: &FeatureBundle<'g>,
) -> Result<ComposedEmbedding<'g>> {
    let c1 = compose_local(s, heads, reference, pyramid, query)?;
    let c2 = rac(
        s,
        ABSORB_PREFIX,
        heads,
        c1.as_visual(),
        Tagged::visual(reference.global, pyramid)?,
    )?;
    let c2 = ComposedEmbedding {
        tokens: c2,
        stage: Stage::Absorbing,
        pyramid,
    };
    let c3 = crm(
        s,
        GLOBAL_PREFIX,
        heads,
        c2.as_visual(),
        Tagged::textual(query.global),
    )?;
    Ok(ComposedEmbedding {
        tokens: c3,
        stage: Stage::GlobalComposition,
        pyramid,
    })
}

/// RAC of the target's local features into its global features.
pub fn fuse_target<'g>(
    s: &Session<'g>,
    heads: usize,
    target: &FeatureBundle<'g>,
    pyramid: PyramidConfig,
) -> Result<ComposedEmbedding<'g>> {
    let tokens = rac(
        s,
        TARGET_PREFIX,
        heads,
        Tagged::visual(target.local, pyramid)?,
        Tagged::visual(target.global, pyramid)?,
    )?;
    Ok(ComposedEmbedding {
        tokens,
        stage: Stage::TargetFusion,
        pyramid,
    })
}
