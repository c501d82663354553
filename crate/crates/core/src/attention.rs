//! Multi-head self-attention, pyramid-pooling self/cross-attention, and the
//! query-conditioned soft-attention gate.
//!
//! Tokens are rows: a `[N, d]` tensor holds `N` tokens of width `d`, and every
//! projection is a right multiplication `R · W`.

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, Session};
use crate::tensor::Tensor;

/// Spatial pooling pyramid over a `grid_h × grid_w` token grid.
///
/// `levels` is the largest window index; windows `i = 2..=levels` are summed.
/// With `levels == 1` the sum is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub levels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PyramidConfig {
    pub fn new(levels: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if levels < 1 || grid_h < 1 || grid_w < 1 {
            return Err(Error::invalid(format!(
                "pyramid needs levels >= 1 and a nonempty grid, got levels={levels} grid={grid_h}x{grid_w}"
            )));
        }
        Ok(Self {
            levels,
            grid_h,
            grid_w,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Rows/cols covered by window `i` at coordinate `p` (inclusive start,
    /// exclusive end, clipped to `0..extent`). Odd windows are centered; even
    /// windows start at the patch itself.
    fn window(i: usize, p: usize, extent: usize) -> (usize, usize) {
        let (lo, hi) = if i % 2 == 1 {
            let h = (i - 1) / 2;
            (p.saturating_sub(h), p + h + 1)
        } else {
            (p, p + i)
        };
        (lo, hi.min(extent))
    }

    /// The `[N, N]` operator `Σ_{i=2}^{levels} Avg_i`, averaging only
    /// in-bounds patches.
    pub fn pooling_matrix(&self) -> Tensor {
        let n = self.tokens();
        let mut m = Tensor::zeros(&[n, n]);
        let data = m.data_mut();
        for i in 2..=self.levels {
            for r in 0..self.grid_h {
                for c in 0..self.grid_w {
                    let (r0, r1) = Self::window(i, r, self.grid_h);
                    let (c0, c1) = Self::window(i, c, self.grid_w);
                    let count = ((r1 - r0) * (c1 - c0)) as f64;
                    let row = r * self.grid_w + c;
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            data[row * n + rr * self.grid_w + cc] += 1.0 / count;
                        }
                    }
                }
            }
        }
        m
    }
}

pub fn pyramid_pool<'g>(r: Var<'g>, cfg: &PyramidConfig) -> Result<Var<'g>> {
    let shape = r.shape();
    if shape.len() != 2 || shape[0] != cfg.tokens() {
        return Err(Error::invalid(format!(
            "pyramid grid {}x{} does not match token tensor {shape:?}",
            cfg.grid_h, cfg.grid_w
        )));
    }
    r.graph().constant(cfg.pooling_matrix()).matmul(r)
}

/// Projection weights of one attention block, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
    pub heads: usize,
}

impl<'g> AttentionParams<'g> {
    pub fn specs(prefix: &str, d: usize, std: f64) -> Vec<ParamSpec> {
        ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| ParamSpec::new(format!("{prefix}.{w}"), &[d, d], Init::Normal(std)))
            .collect()
    }

    pub fn bind(s: &Session<'g>, prefix: &str, heads: usize) -> Result<Self> {
        let p = Self {
            wq: s.param(&format!("{prefix}.wq"))?,
            wk: s.param(&format!("{prefix}.wk"))?,
            wv: s.param(&format!("{prefix}.wv"))?,
            wo: s.param(&format!("{prefix}.wo"))?,
            heads,
        };
        let d = p.width();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Post-softmax attention matrices, one per head.
#[derive(Clone, Debug)]
pub struct AttentionWeights<'g> {
    pub heads: Vec<Var<'g>>,
}

impl AttentionWeights<'_> {
    pub fn matrices(&self) -> Vec<Tensor> {
        self.heads.iter().map(Var::value).collect()
    }
}

fn check_width(op: &'static str, a: &Var<'_>, d: usize) -> Result<()> {
    let s = a.shape();
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(op, &s, &[s.first().copied().unwrap_or(0), d]));
    }
    Ok(())
}

/// Scaled dot-product attention with separate inputs for the query, key and
/// value projections.
fn attend<'g>(
    q_in: Var<'g>,
    k_in: Var<'g>,
    v_in: Var<'g>,
    p: &AttentionParams<'g>,
) -> Result<(Var<'g>, AttentionWeights<'g>)> {
    let d = p.width();
    for x in [&q_in, &k_in, &v_in] {
        check_width("attention", x, d)?;
    }
    let dk = d / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = q_in.matmul(p.wq)?;
    let k = k_in.matmul(p.wk)?;
    let v = v_in.matmul(p.wv)?;
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice_cols(h * dk, dk)?,
                k.slice_cols(h * dk, dk)?,
                v.slice_cols(h * dk, dk)?,
            )
        };
        let a = qh.matmul_t(kh)?.scale(scale)?.softmax(1)?;
        outs.push(a.matmul(vh)?);
        weights.push(a);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        concat(&outs, 1)?
    };
    Ok((joined.matmul(p.wo)?, AttentionWeights { heads: weights }))
}

/// Standard multi-head self-attention.
pub fn msa<'g>(r: Var<'g>, p: &AttentionParams<'g>) -> Result<Var<'g>> {
    Ok(attend(r, r, r, p)?.0)
}

/// Self-attention whose queries see `R + pyramid_pool(R)`.
pub fn psa<'g>(
    r: Var<'g>,
    p: &AttentionParams<'g>,
    cfg: &PyramidConfig,
) -> Result<(Var<'g>, AttentionWeights<'g>)> {
    let pooled = pyramid_pool(r, cfg)?;
    attend(r.add(pooled)?, r, r, p)
}

/// Plain cross-attention: queries from `r_b`, keys and values from `r_a`.
pub fn cross_attention<'g>(
    r_b: Var<'g>,
    r_a: Var<'g>,
    p: &AttentionParams<'g>,
) -> Result<(Var<'g>, AttentionWeights<'g>)> {
    attend(r_b, r_a, r_a, p)
}

/// Cross-attention whose keys see `R_A + pyramid_pool(R_A)`; `r_a` is the
/// visual side.
pub fn pca<'g>(
    r_b: Var<'g>,
    r_a: Var<'g>,
    p: &AttentionParams<'g>,
    cfg: &PyramidConfig,
) -> Result<(Var<'g>, AttentionWeights<'g>)> {
    let pooled = pyramid_pool(r_a, cfg)?;
    attend(r_b, r_a.add(pooled)?, r_a, p)
}

pub fn soa_specs(prefix: &str, d: usize, std: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.wg"), &[2 * d, d], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.bg"), &[d], Init::Zeros),
    ]
}

/// Soft-attention gate over the reference tokens.
///
/// The query attends over the reference (`softmax(R_Q·R_Rᵀ/√d)·R_R`), the
/// result is mean-pooled into one context vector `c`, and every reference
/// token `r_n` is scaled elementwise by `sigmoid([r_n, c]·W_g + b_g)`.
/// Output shape equals `r_r`.
pub fn soa<'g>(s: &Session<'g>, prefix: &str, r_q: Var<'g>, r_r: Var<'g>) -> Result<Var<'g>> {
    let (sq, sr) = (r_q.shape(), r_r.shape());
    if sq.len() != 2 || sr.len() != 2 || sq[1] != sr[1] {
        return Err(Error::shape("soa", &sq, &sr));
    }
    let (n, d) = (sr[0], sr[1]);
    let g = r_q.graph();
    let attn = r_q.matmul_t(r_r)?.scale(1.0 / (d as f64).sqrt())?.softmax(1)?;
    let context = attn.matmul(r_r)?.mean(0)?.reshape(&[1, d])?;
    let broadcast = g.constant(Tensor::filled(&[n, 1], 1.0)).matmul(context)?;
    let wg = s.param(&format!("{prefix}.wg"))?;
    let bg = s.param(&format!("{prefix}.bg"))?;
    let gate = concat(&[r_r, broadcast], 1)?.matmul(wg)?.add_row(bg)?.sigmoid()?;
    gate.mul(r_r)
}
