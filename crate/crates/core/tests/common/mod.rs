//! Independent plain-f64 oracles: nested-Vec matrices, naive loops, and
//! straight-line transcriptions of the model's blocks. Nothing here touches
//! the tape.
#![allow(dead_code)]

use cir_core::losses::{LossWeights, MarginConfig, MarginVariant};
use cir_core::miner::Query;
use cir_core::params::ParamStore;
use cir_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let d = Normal::new(0.0, std).unwrap();
    (0..rows).map(|_| (0..cols).map(|_| d.sample(rng)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(name).unwrap();
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t)
    }
}

pub fn param_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "col count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, row: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(row).map(|(p, q)| p + q).collect()).collect()
}

pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Sum over window sizes `2..=levels` of the average of the in-bounds
/// patches of each window. A window of odd size `i` spans `(i−1)/2` patches
/// either side of the anchor; one of even size starts at the anchor.
pub fn pyramid_pool(r: &Mat, levels: usize, gh: usize, gw: usize) -> Mat {
    let d = r[0].len();
    let mut out = vec![vec![0.0; d]; gh * gw];
    for i in 2..=levels {
        let (before, after) = if i % 2 == 1 { ((i - 1) / 2, (i - 1) / 2) } else { (0, i - 1) };
        for ar in 0..gh {
            for ac in 0..gw {
                let mut members = Vec::new();
                for pr in 0..gh {
                    for pc in 0..gw {
                        let in_r = pr + before >= ar && pr <= ar + after;
                        let in_c = pc + before >= ac && pc <= ac + after;
                        if in_r && in_c {
                            members.push(pr * gw + pc);
                        }
                    }
                }
                for j in 0..d {
                    let avg = members.iter().map(|&m| r[m][j]).sum::<f64>() / members.len() as f64;
                    out[ar * gw + ac][j] += avg;
                }
            }
        }
    }
    out
}

/// Weights of one attention block, read from a store.
pub struct Attn {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub heads: usize,
}

impl Attn {
    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Self {
        Self {
            wq: param(store, &format!("{prefix}.wq")),
            wk: param(store, &format!("{prefix}.wk")),
            wv: param(store, &format!("{prefix}.wv")),
            wo: param(store, &format!("{prefix}.wo")),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention with separate query-, key- and
    /// value-projection inputs.
    pub fn attend(&self, q_in: &Mat, k_in: &Mat, v_in: &Mat) -> Mat {
        let d = self.wq.len();
        let dk = d / self.heads;
        let (q, k, v) = (matmul(q_in, &self.wq), matmul(k_in, &self.wk), matmul(v_in, &self.wv));
        let mut joined: Mat = vec![Vec::new(); q.len()];
        for h in 0..self.heads {
            let (qh, kh, vh) = (cols(&q, h * dk, dk), cols(&k, h * dk, dk), cols(&v, h * dk, dk));
            let scores = map(&matmul(&qh, &transpose(&kh)), |x| x / (dk as f64).sqrt());
            let out = matmul(&softmax_rows(&scores), &vh);
            joined = hcat(&joined, &out);
        }
        matmul(&joined, &self.wo)
    }
}

/// Tokens tagged with an optional grid; `None` means text.
#[derive(Clone)]
pub struct Tokens {
    pub x: Mat,
    pub grid: Option<(usize, usize, usize)>,
}

pub fn ln(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    layer_norm(
        x,
        &param_vec(store, &format!("{prefix}.gamma")),
        &param_vec(store, &format!("{prefix}.beta")),
    )
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    add_row(&matmul(x, &param(store, &format!("{prefix}.w"))), &param_vec(store, &format!("{prefix}.b")))
}

pub fn ffn(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = map(&linear(store, &format!("{prefix}.fc1"), x), gelu);
    linear(store, &format!("{prefix}.fc2"), &h)
}

/// `LN(R + PSA(R))` for a grid, `LN(R + MSA(R))` for text.
fn self_block(store: &ParamStore, prefix: &str, heads: usize, r: &Tokens) -> Mat {
    let a = Attn::load(store, &format!("{prefix}.attn"), heads);
    let out = match r.grid {
        Some((levels, gh, gw)) => a.attend(&add(&r.x, &pyramid_pool(&r.x, levels, gh, gw)), &r.x, &r.x),
        None => a.attend(&r.x, &r.x, &r.x),
    };
    ln(store, &format!("{prefix}.ln"), &add(&r.x, &out))
}

/// Cross-attention with queries `q`; keys see the pyramid when `kv` is a grid.
fn cross(store: &ParamStore, prefix: &str, heads: usize, q: &Mat, kv: &Tokens) -> Mat {
    let a = Attn::load(store, prefix, heads);
    match kv.grid {
        Some((levels, gh, gw)) => a.attend(q, &add(&kv.x, &pyramid_pool(&kv.x, levels, gh, gw)), &kv.x),
        None => a.attend(q, &kv.x, &kv.x),
    }
}

/// Query-conditioned gate: `sigmoid([r_n, c]·W_g + b) ⊙ r_n` with `c` the
/// mean over query rows of the query→reference attention readout.
pub fn soa(store: &ParamStore, prefix: &str, r_q: &Mat, r_r: &Mat) -> Mat {
    let d = r_r[0].len();
    let attn = softmax_rows(&map(&matmul(r_q, &transpose(r_r)), |x| x / (d as f64).sqrt()));
    let c = mean_rows(&matmul(&attn, r_r));
    let wg = param(store, &format!("{prefix}.wg"));
    let bg = param_vec(store, &format!("{prefix}.bg"));
    r_r.iter()
        .map(|row| {
            let z: Vec<f64> = row.iter().chain(&c).copied().collect();
            (0..d)
                .map(|j| {
                    let g = sigmoid((0..2 * d).map(|t| z[t] * wg[t][j]).sum::<f64>() + bg[j]);
                    g * row[j]
                })
                .collect()
        })
        .collect()
}

/// CRM, written out step by step.
pub fn crm(store: &ParamStore, prefix: &str, heads: usize, r_r: &Tokens, r_q: &Tokens) -> Mat {
    let hat_r = self_block(store, &format!("{prefix}.self_r"), heads, r_r);
    let hat_q = self_block(store, &format!("{prefix}.self_q"), heads, r_q);
    let hat_r_t = Tokens { x: hat_r.clone(), grid: r_r.grid };
    let hat_q_t = Tokens { x: hat_q.clone(), grid: r_q.grid };
    let bar_r = ln(
        store,
        &format!("{prefix}.ln_r"),
        &add(&hat_r, &cross(store, &format!("{prefix}.cross_r"), heads, &hat_r, &hat_q_t)),
    );
    let bar_q = ln(
        store,
        &format!("{prefix}.ln_q"),
        &add(&hat_q, &cross(store, &format!("{prefix}.cross_q"), heads, &hat_q, &hat_r_t)),
    );
    let gated = soa(store, &format!("{prefix}.soa"), &bar_q, &bar_r);
    let mixed = ln(store, &format!("{prefix}.ln_out"), &add(&bar_r, &gated));
    ffn(store, &format!("{prefix}.ffn"), &mixed)
}

/// RAC, written out step by step.
pub fn rac(store: &ParamStore, prefix: &str, heads: usize, r_l: &Tokens, r_g: &Tokens) -> Mat {
    let hat_l = self_block(store, &format!("{prefix}.self_l"), heads, r_l);
    let hat_g = self_block(store, &format!("{prefix}.self_g"), heads, r_g);
    let attended = cross(
        store,
        &format!("{prefix}.cross"),
        heads,
        &hat_g,
        &Tokens { x: hat_l, grid: r_l.grid },
    );
    let bar_g = map(&linear(store, &format!("{prefix}.transform"), &hcat(&attended, &hat_g)), gelu);
    let mixed = ln(store, &format!("{prefix}.ln_out"), &add(&hat_g, &bar_g));
    ffn(store, &format!("{prefix}.ffn"), &mixed)
}

/// `max(0, ‖p − y‖ − ‖n − y‖ + m)`.
pub fn triplet(p: &[f64], n: &[f64], y: &[f64], m: f64) -> f64 {
    (dist(p, y) - dist(n, y) + m).max(0.0)
}

/// Exact OT over the Birkhoff polytope for uniform 3×3 marginals: the optimum
/// of a linear objective is attained at a vertex, i.e. a permutation matrix
/// scaled by 1/3.
pub fn exact_ot_3x3(c: &[[f64; 3]; 3]) -> f64 {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms
        .iter()
        .map(|p| (0..3).map(|i| c[i][p[i]]).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min)
}

/// Bidirectional triplet as a plain scalar: forward anchored at the target over the
/// counterfactual queries, backward anchored at the query over other targets.
pub fn bidirectional_oracle(q: &[f64], t: &[f64], qn: &[Vec<f64>], tn: &[Vec<f64>], w: &LossWeights, mc: &MarginConfig) -> f64 {
    let cos = dot(q, t) / (norm(q) * norm(t));
    let s = (cos + 1.0) / 2.0;
    let e = match mc.variant {
        MarginVariant::GrowsWithSimilarity => s,
        MarginVariant::ShrinksWithSimilarity => 1.0 - s,
    };
    let m_a = (1.0 - mc.a.powf(e)) / (1.0 - mc.a) * mc.m;
    let fwd = qn.iter().map(|n| triplet(q, n, t, mc.m)).sum::<f64>() / qn.len() as f64;
    let bwd = tn.iter().map(|n| triplet(t, n, q, m_a)).sum::<f64>() / tn.len() as f64;
    w.lambda_q * fwd + w.lambda_t * bwd
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Selection by repeated minimum over (similarity, corpus position), skipping
/// duplicates of the query text.
pub fn ics_tcs_oracle(corpus: &[Query], embs: &[Vec<f64>], q: usize, k_q: usize, k_r: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left: Vec<(f64, usize)> = (0..corpus.len())
        .filter(|&j| j != q)
        .map(|j| (cos(&embs[q], &embs[j]), j))
        .filter(|(s, _)| *s < 1.0 - 1e-9)
        .collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                best = i;
            }
        }
        order.push(left.remove(best).1);
    }
    let ics = order[..k_q].iter().map(|&j| corpus[j].id).collect();
    let mut tcs: Vec<usize> = Vec::new();
    for &j in &order {
        let img = corpus[j].reference_id;
        if tcs.len() < k_r && img != corpus[q].reference_id && !tcs.contains(&img) {
            tcs.push(img);
        }
    }
    (ics, tcs)
}
