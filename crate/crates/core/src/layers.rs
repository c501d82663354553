//! Small building blocks shared by the encoders and composition blocks.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Init, ParamSpec, Session};

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, std: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[d_in, d_out], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.b"), &[d_out], Init::Zeros),
    ]
}

/// `x · W + b` over the rows of `x`.
pub fn linear<'g>(s: &Session<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    x.matmul(w)?.add_row(b)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm<'g>(s: &Session<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let gamma = s.param(&format!("{prefix}.gamma"))?;
    let beta = s.param(&format!("{prefix}.beta"))?;
    x.layer_norm(gamma, beta)
}

/// Linear → gelu → Linear.
pub fn feed_forward_specs(prefix: &str, d: usize, hidden: usize, std: f64) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.fc1"), d, hidden, std);
    v.extend(linear_specs(&format!("{prefix}.fc2"), hidden, d, std));
    v
}

pub fn feed_forward<'g>(s: &Session<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?.gelu()?;
    linear(s, &format!("{prefix}.fc2"), h)
}
