//! Training objective: bidirectional adaptive-margin triplet loss over
//! counterfactual negatives, reconstruction loss, and entropic optimal
//! transport alignment between composed queries and targets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{linear, linear_specs};
use crate::params::{ParamSpec, Session};
use crate::tensor::Tensor;

pub const RECON_IMAGE: &str = "recon.image";
pub const RECON_TEXT: &str = "recon.text";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_t: f64,
    pub lambda_img: f64,
    pub lambda_text: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_q: 1.0,
            lambda_t: 0.4,
            lambda_img: 0.1,
            lambda_text: 1.0,
            lambda_a: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_q, self.lambda_t, self.lambda_img, self.lambda_text, self.lambda_a];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Which way the adaptive margin moves with the query–target similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    /// `(1 − a^s)/(1 − a) · m`: grows with similarity.
    GrowsWithSimilarity,
    /// `(1 − a^{1−s})/(1 − a) · m`: dissimilar pairs get the larger margin.
    ShrinksWithSimilarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginConfig {
    pub m: f64,
    pub a: f64,
    pub variant: MarginVariant,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            m: 0.2,
            a: 2.0,
            variant: MarginVariant::ShrinksWithSimilarity,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::invalid(format!("margin m must be positive, got {}", self.m)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) || self.a == 1.0 {
            return Err(Error::invalid(format!(
                "adaptive-margin base a must be positive and != 1, got {}",
                self.a
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// Below this ε the solver iterates on log-potentials.
pub const LOG_DOMAIN_BELOW: f64 = 0.02;
/// Largest `C/ε` whose kernel `exp(−C/ε)` stays comfortably inside f64 range.
pub const MAX_KERNEL_EXPONENT: f64 = 700.0;

/// `max(0, ‖pos − anchor‖ − ‖neg − anchor‖ + m)`.
pub fn triplet<'g>(pos: Var<'g>, neg: Var<'g>, anchor: Var<'g>, m: f64) -> Result<Var<'g>> {
    pos.l2_distance(anchor)?
        .sub(neg.l2_distance(anchor)?)?
        .add_scalar(m)?
        .relu()
}

/// [`triplet`] averaged over a nonempty list of negatives.
pub fn triplet_mean<'g>(pos: Var<'g>, negs: &[Var<'g>], anchor: Var<'g>, m: f64) -> Result<Var<'g>> {
    if negs.is_empty() {
        return Err(Error::invalid("triplet loss needs at least one negative"));
    }
    let mut acc = triplet(pos, negs[0], anchor, m)?;
    for &n in &negs[1..] {
        acc = acc.add(triplet(pos, n, anchor, m)?)?;
    }
    acc.scale(1.0 / negs.len() as f64)
}

pub fn adaptive_margin(s_qt: f64, cfg: &MarginConfig) -> Result<f64> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&s_qt) {
        return Err(Error::invalid(format!("s_qt must lie in [0, 1], got {s_qt}")));
    }
    let e = match cfg.variant {
        MarginVariant::GrowsWithSimilarity => s_qt,
        MarginVariant::ShrinksWithSimilarity => 1.0 - s_qt,
    };
    Ok((1.0 - cfg.a.powf(e)) / (1.0 - cfg.a) * cfg.m)
}

/// `(cos + 1) / 2` of two vectors, computed on values only: the result is a
/// plain number and carries no gradient.
pub fn similarity_sqt(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("similarity_sqt", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    Ok(((cos.clamp(-1.0, 1.0)) + 1.0) / 2.0)
}

/// Per-sample bidirectional triplet loss:
///
/// - forward: anchor `c_tar`, positive `c_que`, negatives the composed
///   counterfactual queries, margin `m`;
/// - backward: anchor `c_que`, positive `c_tar`, negatives the other targets
///   in the batch, adaptive margin `m_a`.
///
/// Returns the loss and the adaptive margin used.
pub fn bidirectional_triplet<'g>(
    c_que: Var<'g>,
    c_tar: Var<'g>,
    query_negatives: &[Var<'g>],
    target_negatives: &[Var<'g>],
    weights: &LossWeights,
    margins: &MarginConfig,
) -> Result<(Var<'g>, f64)> {
    if query_negatives.is_empty() || target_negatives.is_empty() {
        return Err(Error::invalid(
            "bidirectional triplet loss needs at least one negative per direction",
        ));
    }
    let m_a = adaptive_margin(similarity_sqt(&c_que.value(), &c_tar.value())?, margins)?;
    let loss = bidirectional_triplet_with(c_que, c_tar, query_negatives, target_negatives, weights, margins.m, m_a)?;
    Ok((loss, m_a))
}

/// [`bidirectional_triplet`] with the backward margin supplied.
pub fn bidirectional_triplet_with<'g>(
    c_que: Var<'g>,
    c_tar: Var<'g>,
    query_negatives: &[Var<'g>],
    target_negatives: &[Var<'g>],
    weights: &LossWeights,
    m: f64,
    m_a: f64,
) -> Result<Var<'g>> {
    let fwd = triplet_mean(c_que, query_negatives, c_tar, m)?;
    let bwd = triplet_mean(c_tar, target_negatives, c_que, m_a)?;
    fwd.scale(weights.lambda_q)?.add(bwd.scale(weights.lambda_t)?)
}

pub fn reconstruction_specs(d: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = linear_specs(RECON_IMAGE, d, d, std);
    v.extend(linear_specs(RECON_TEXT, d, d, std));
    v
}

/// Visual and textual linear projections of a pooled composed query.
pub fn reconstruction_heads<'g>(s: &Session<'g>, pooled_query: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let d = pooled_query.shape()[0];
    let row = pooled_query.reshape(&[1, d])?;
    let img = linear(s, RECON_IMAGE, row)?.reshape(&[d])?;
    let txt = linear(s, RECON_TEXT, row)?.reshape(&[d])?;
    Ok((img, txt))
}

/// `λ_img ‖R_img − C_tar‖ + λ_text ‖R_text − F_T^g‖` on pooled vectors.
pub fn reconstruct_loss<'g>(
    r_img: Var<'g>,
    r_text: Var<'g>,
    c_tar: Var<'g>,
    target_global: Var<'g>,
    weights: &LossWeights,
) -> Result<Var<'g>> {
    let a = r_img.l2_distance(c_tar)?.scale(weights.lambda_img)?;
    let b = r_text.l2_distance(target_global)?.scale(weights.lambda_text)?;
    a.add(b)
}

/// Entropic optimal-transport solution.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub gamma: Tensor,
    pub cost: Tensor,
    /// `⟨γ, C⟩_F`.
    pub distance: f64,
    pub iterations: usize,
    /// Largest absolute deviation of the plan's marginals from the targets.
    pub marginal_error: f64,
    pub converged: bool,
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(Error::invalid(format!("{name} has {} entries, cost needs {len}", m.len())));
    }
    if m.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::invalid(format!("{name} must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Alternating marginal scaling for `min ⟨γ, C⟩ − ε H(γ)` subject to
/// `γ 1 = μ`, `γᵀ 1 = ν`.
///
/// For `ε ≥ 0.02` the kernel `exp(−C/ε)` is scaled directly, and costs whose
/// exponent would exceed 700 are rejected with the smallest safe ε. Smaller ε
/// switches to log-domain potentials, which cannot underflow.
pub fn sinkhorn(cost: &Tensor, mu: &[f64], nu: &[f64], cfg: &SinkhornConfig) -> Result<TransportPlan> {
    if cost.rank() != 2 {
        return Err(Error::invalid(format!("cost must be a matrix, got shape {:?}", cost.shape())));
    }
    let (n, k) = (cost.rows(), cost.cols());
    check_marginal("source marginal", mu, n)?;
    check_marginal("target marginal", nu, k)?;
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let c = cost.data();
    let (gamma, iterations, marginal_error) = if eps < LOG_DOMAIN_BELOW {
        sinkhorn_log(c, mu, nu, n, k, eps, cfg)
    } else {
        let c_max = c.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let ratio = c_max / eps;
        if ratio > MAX_KERNEL_EXPONENT {
            return Err(Error::KernelUnderflow {
                ratio,
                suggested_floor: c_max / MAX_KERNEL_EXPONENT,
            });
        }
        sinkhorn_standard(c, mu, nu, n, k, eps, cfg)
    };
    let distance = gamma.iter().zip(c).map(|(g, c)| g * c).sum();
    Ok(TransportPlan {
        gamma: Tensor::from_parts(vec![n, k], gamma),
        cost: cost.clone(),
        distance,
        iterations,
        marginal_error,
        converged: marginal_error < cfg.tol,
    })
}

fn marginal_violation(gamma: &[f64], mu: &[f64], nu: &[f64], n: usize, k: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let r: f64 = gamma[i * k..(i + 1) * k].iter().sum();
        worst = worst.max((r - mu[i]).abs());
    }
    for j in 0..k {
        let col: f64 = (0..n).map(|i| gamma[i * k + j]).sum();
        worst = worst.max((col - nu[j]).abs());
    }
    worst
}

fn sinkhorn_standard(
    c: &[f64],
    mu: &[f64],
    nu: &[f64],
    n: usize,
    k: usize,
    eps: f64,
    cfg: &SinkhornConfig,
) -> (Vec<f64>, usize, f64) {
    let kern: Vec<f64> = c.iter().map(|&x| (-x / eps).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let plan = |u: &[f64], v: &[f64]| -> Vec<f64> {
        (0..n * k).map(|idx| u[idx / k] * kern[idx] * v[idx % k]).collect()
    };
    let mut iters = 0;
    let mut err = f64::INFINITY;
    while iters < cfg.max_iters {
        for i in 0..n {
            let kv: f64 = (0..k).map(|j| kern[i * k + j] * v[j]).sum();
            u[i] = mu[i] / kv;
        }
        for j in 0..k {
            let ku: f64 = (0..n).map(|i| kern[i * k + j] * u[i]).sum();
            v[j] = nu[j] / ku;
        }
        iters += 1;
        err = marginal_violation(&plan(&u, &v), mu, nu, n, k);
        if err < cfg.tol {
            break;
        }
    }
    (plan(&u, &v), iters, err)
}

fn sinkhorn_log(
    c: &[f64],
    mu: &[f64],
    nu: &[f64],
    n: usize,
    k: usize,
    eps: f64,
    cfg: &SinkhornConfig,
) -> (Vec<f64>, usize, f64) {
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n * k)
            .map(|idx| ((f[idx / k] + g[idx % k] - c[idx]) / eps).exp())
            .collect()
    };
    let mut iters = 0;
    let mut err = f64::INFINITY;
    while iters < cfg.max_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..k).map(|j| (g[j] - c[i * k + j]) / eps));
            f[i] = eps * (mu[i].ln() - lse);
        }
        for j in 0..k {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c[i * k + j]) / eps));
            g[j] = eps * (nu[j].ln() - lse);
        }
        iters += 1;
        err = marginal_violation(&plan(&f, &g), mu, nu, n, k);
        if err < cfg.tol {
            break;
        }
    }
    (plan(&f, &g), iters, err)
}

/// `λ_a · ⟨γ*, C_m⟩_F` with `C_m = 1 − Q·Tᵀ` over unit-norm rows and uniform
/// marginals. The plan is solved on values and enters the graph as a
/// constant, so gradients flow through `C_m` only.
pub fn alignment_loss<'g>(
    queries: Var<'g>,
    targets: Var<'g>,
    cfg: &SinkhornConfig,
    lambda_a: f64,
) -> Result<(Var<'g>, TransportPlan)> {
    let cost = alignment_cost(queries, targets)?;
    let plan = solve_alignment(&cost.value(), cfg)?;
    let loss = weighted_cost(cost, &plan.gamma, lambda_a)?;
    Ok((loss, plan))
}

/// [`alignment_loss`] with the plan supplied.
pub fn alignment_loss_with_plan<'g>(
    queries: Var<'g>,
    targets: Var<'g>,
    gamma: &Tensor,
    lambda_a: f64,
) -> Result<Var<'g>> {
    weighted_cost(alignment_cost(queries, targets)?, gamma, lambda_a)
}

/// `C_m = 1 − Q·Tᵀ`.
fn alignment_cost<'g>(queries: Var<'g>, targets: Var<'g>) -> Result<Var<'g>> {
    let (sq, st) = (queries.shape(), targets.shape());
    if sq.len() != 2 || st.len() != 2 || sq[1] != st[1] {
        return Err(Error::shape("alignment_loss", &sq, &st));
    }
    let (b, bt) = (sq[0], st[0]);
    if b < 2 || bt < 2 {
        return Err(Error::invalid(format!("alignment needs batches of >= 2, got {b} and {bt}")));
    }
    queries
        .graph()
        .constant(Tensor::filled(&[b, bt], 1.0))
        .sub(queries.matmul_t(targets)?)
}

fn solve_alignment(cost: &Tensor, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (b, bt) = (cost.rows(), cost.cols());
    sinkhorn(cost, &vec![1.0 / b as f64; b], &vec![1.0 / bt as f64; bt], cfg)
}

fn weighted_cost<'g>(cost: Var<'g>, gamma: &Tensor, lambda_a: f64) -> Result<Var<'g>> {
    if gamma.shape() != cost.shape().as_slice() {
        return Err(Error::shape("transport plan", gamma.shape(), &cost.shape()));
    }
    cost.graph().constant(gamma.clone()).mul(cost)?.sum()?.scale(lambda_a)
}

/// Per-query pieces of one batch on the shared graph; all vectors pooled.
#[derive(Clone, Debug)]
pub struct SampleTerms<'g> {
    pub query: Var<'g>,
    pub target: Var<'g>,
    pub target_global: Var<'g>,
    pub counterfactuals: Vec<Var<'g>>,
    pub recon_image: Var<'g>,
    pub recon_text: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Bidirectional triplet + reconstruction + alignment.
    Full,
    /// One triplet direction only: anchor composed query, positive its
    /// target, negatives the other targets in the batch, margin `m`.
    TripletOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<'g> {
    pub total: Var<'g>,
    pub triplet: f64,
    pub reconstruct: f64,
    pub alignment: f64,
}

/// Values the batch loss reads but does not differentiate: each sample's
/// adaptive margin, its reconstruction anchors (`C_tar`, pooled `F_T^g`) and,
/// for the full objective, the transport plan. Reconstruction anchors are
/// fixed per step; letting the heads pull the targets instead collapses the
/// target encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    pub margins: Vec<f64>,
    pub anchors: Vec<(Tensor, Tensor)>,
    pub plan: Option<TransportPlan>,
}

impl Detached {
    pub fn capture(
        samples: &[SampleTerms<'_>],
        objective: Objective,
        margins: &MarginConfig,
        sinkhorn_cfg: &SinkhornConfig,
    ) -> Result<Self> {
        let m = samples
            .iter()
            .map(|s| adaptive_margin(similarity_sqt(&s.query.value(), &s.target.value())?, margins))
            .collect::<Result<_>>()?;
        let plan = match objective {
            Objective::Full if samples.len() >= 2 => {
                let q = Tensor::from_rows(&samples.iter().map(|s| s.query.value().into_data()).collect::<Vec<_>>())?;
                let t = Tensor::from_rows(&samples.iter().map(|s| s.target.value().into_data()).collect::<Vec<_>>())?;
                let g = Graph::new();
                let cost = alignment_cost(g.constant(q), g.constant(t))?.value();
                Some(solve_alignment(&cost, sinkhorn_cfg)?)
            }
            _ => None,
        };
        Ok(Self {
            margins: m,
            anchors: samples.iter().map(|s| (s.target.value(), s.target_global.value())).collect(),
            plan,
        })
    }
}

/// Batch loss: per-sample terms averaged over the batch, plus the batch-level
/// alignment term for [`Objective::Full`].
pub fn total_loss<'g>(
    samples: &[SampleTerms<'g>],
    objective: Objective,
    weights: &LossWeights,
    margins: &MarginConfig,
    sinkhorn_cfg: &SinkhornConfig,
) -> Result<LossBreakdown<'g>> {
    let detached = Detached::capture(samples, objective, margins, sinkhorn_cfg)?;
    total_loss_with(samples, &detached, objective, weights, margins)
}

/// [`total_loss`] with the detached values supplied.
pub fn total_loss_with<'g>(
    samples: &[SampleTerms<'g>],
    detached: &Detached,
    objective: Objective,
    weights: &LossWeights,
    margins: &MarginConfig,
) -> Result<LossBreakdown<'g>> {
    if samples.len() < 2 {
        return Err(Error::invalid("a batch needs at least two samples for in-batch negatives"));
    }
    if detached.margins.len() != samples.len() || detached.anchors.len() != samples.len() {
        return Err(Error::invalid("detached values do not match the batch"));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut triplet_sum: Option<Var<'g>> = None;
    let mut recon_sum: Option<Var<'g>> = None;
    for (i, s) in samples.iter().enumerate() {
        let others: Vec<Var<'g>> = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| o.target)
            .collect();
        let t = match objective {
            Objective::Full => bidirectional_triplet_with(
                s.query,
                s.target,
                &s.counterfactuals,
                &others,
                weights,
                margins.m,
                detached.margins[i],
            )?,
            Objective::TripletOnly => triplet_mean(s.target, &others, s.query, margins.m)?,
        };
        triplet_sum = Some(match triplet_sum {
            Some(acc) => acc.add(t)?,
            None => t,
        });
        if objective == Objective::Full {
            let g = s.query.graph();
            let (tar, tar_global) = &detached.anchors[i];
            let r = reconstruct_loss(
                s.recon_image,
                s.recon_text,
                g.constant(tar.clone()),
                g.constant(tar_global.clone()),
                weights,
            )?;
            recon_sum = Some(match recon_sum {
                Some(acc) => acc.add(r)?,
                None => r,
            });
        }
    }
    let triplet = triplet_sum.expect("nonempty batch").scale(scale)?;
    let mut total = triplet;
    let mut breakdown = (triplet.item(), 0.0, 0.0);
    if let Some(r) = recon_sum {
        let r = r.scale(scale)?;
        breakdown.1 = r.item();
        total = total.add(r)?;
        let q = stack_rows(&samples.iter().map(|s| s.query).collect::<Vec<_>>())?;
        let t = stack_rows(&samples.iter().map(|s| s.target).collect::<Vec<_>>())?;
        let plan = detached
            .plan
            .as_ref()
            .ok_or_else(|| Error::invalid("full objective needs a transport plan"))?;
        let a = alignment_loss_with_plan(q, t, &plan.gamma, weights.lambda_a)?;
        breakdown.2 = a.item();
        total = total.add(a)?;
    }
    Ok(LossBreakdown {
        total,
        triplet: breakdown.0,
        reconstruct: breakdown.1,
        alignment: breakdown.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn triplet_formula_cases() {
        let g = Graph::new();
        let y = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let p1 = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let n15 = g.constant(Tensor::vector(vec![0.0, 1.5]));
        assert_eq!(triplet(p1, n15, y, 0.2).unwrap().item(), 0.0);
        assert!((triplet(p1, p1, y, 0.2).unwrap().item() - 0.2).abs() < 1e-15);
        assert!((triplet(n15, p1, y, 0.2).unwrap().item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn margin_endpoints() {
        let lit = MarginConfig {
            variant: MarginVariant::GrowsWithSimilarity,
            ..Default::default()
        };
        let pro = MarginConfig::default();
        assert!((adaptive_margin(1.0, &lit).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(adaptive_margin(0.0, &lit).unwrap(), 0.0);
        assert!((adaptive_margin(0.0, &pro).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(adaptive_margin(1.0, &pro).unwrap(), 0.0);
        let bad = MarginConfig { a: 1.0, ..pro };
        assert!(adaptive_margin(0.5, &bad).is_err());
        assert!(adaptive_margin(1.5, &pro).is_err());
    }

    #[test]
    fn sqt_cases() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        assert!((similarity_sqt(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity_sqt(&a, &Tensor::vector(vec![-1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(similarity_sqt(&a, &Tensor::vector(vec![0.0, 1.0])).unwrap(), 0.5);
    }

    #[test]
    fn zero_cost_gives_outer_product() {
        let plan = sinkhorn(&Tensor::zeros(&[2, 3]), &[0.25, 0.75], &[0.2, 0.3, 0.5], &Default::default()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let want = [0.25, 0.75][i] * [0.2, 0.3, 0.5][j];
                assert!((plan.gamma.at2(i, j) - want).abs() < 1e-12);
            }
        }
        assert_eq!(plan.distance, 0.0);
    }

    #[test]
    fn permutation_cost_small_epsilon() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.005,
            ..Default::default()
        };
        let plan = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        assert!((plan.gamma.at2(0, 0) - 0.5).abs() < 1e-6);
        assert!(plan.distance < 1e-6);
    }

    #[test]
    fn rejects_bad_marginals_and_underflow() {
        let c = Tensor::filled(&[2, 2], 1.0);
        assert!(sinkhorn(&c, &[0.5, 0.6], &[0.5, 0.5], &Default::default()).is_err());
        assert!(sinkhorn(&c, &[1.0, 0.0], &[0.5, 0.5], &Default::default()).is_err());
        let big = Tensor::filled(&[2, 2], 100.0);
        match sinkhorn(&big, &[0.5, 0.5], &[0.5, 0.5], &Default::default()) {
            Err(Error::KernelUnderflow { suggested_floor, .. }) => {
                assert!((suggested_floor - 100.0 / 700.0).abs() < 1e-12)
            }
            other => panic!("expected underflow, got {other:?}"),
        }
    }

    #[test]
    fn alignment_needs_two_rows() {
        let g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(alignment_loss(q, q, &Default::default(), 1.0).is_err());
    }

    #[test]
    fn empty_negatives_rejected() {
        let g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = LossWeights::default();
        let m = MarginConfig::default();
        assert!(bidirectional_triplet(v, v, &[], &[v], &w, &m).is_err());
        assert!(bidirectional_triplet(v, v, &[v], &[], &w, &m).is_err());
    }
}
