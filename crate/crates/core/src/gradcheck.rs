//! Seeded finite-difference checks of every differentiable primitive and
//! every composite module. Each case draws its inputs and weights as named
//! parameters, reduces the output to a scalar with a fixed probe, and compares
//! the tape gradient of every parameter against central differences.
//!
//! Values the loss deliberately detaches (adaptive margins, reconstruction
//! anchors) are held at their base-point values on the numeric side. The
//! transport plan is held fixed in one alignment case and left live in the
//! envelope cases, which therefore get a looser tolerance.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{cross_attention, msa, pca, psa, pyramid_pool, soa, soa_specs, AttentionParams, PyramidConfig};
use crate::autodiff::{concat, stack_rows, stack_scalars, Graph, Var};
use crate::composition::{
    composition_specs, compose_query, crm, crm_specs, fuse_target, pool, rac, rac_specs, Tagged,
};
use crate::encoders::{patchify, text_encode, text_specs, visual_encode, visual_specs, EncoderConfig, FeatureBundle};
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_margin, alignment_loss, alignment_loss_with_plan, bidirectional_triplet, bidirectional_triplet_with, reconstruct_loss, reconstruction_heads,
    reconstruction_specs, similarity_sqt, sinkhorn, total_loss, total_loss_with, triplet_mean, Detached,
    LossWeights, MarginConfig, Objective, SampleTerms, SinkhornConfig,
};
use crate::params::{ParamSpec, ParamStore, Session};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

pub const INSTANCES: usize = 20;
pub const STEP: f64 = 1e-5;
/// Single differentiable operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
/// Attention, encoders, composition blocks and the non-transport losses.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Anything differentiated through the transport plan with its envelope
/// gradient (the plan's own dependence on the cost is dropped).
pub const ENVELOPE_TOLERANCE: f64 = 1e-3;
/// Coordinates sampled per parameter tensor per instance.
const COORDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SuiteModule {
    Autodiff,
    Attention,
    Encoders,
    Composition,
    Losses,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 5] = [
        SuiteModule::Autodiff,
        SuiteModule::Attention,
        SuiteModule::Encoders,
        SuiteModule::Composition,
        SuiteModule::Losses,
    ];
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteModule::Autodiff => "autodiff",
            SuiteModule::Attention => "attention",
            SuiteModule::Encoders => "encoders",
            SuiteModule::Composition => "composition",
            SuiteModule::Losses => "losses",
        })
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteModule::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown module {s:?}; expected one of autodiff, attention, encoders, composition, losses")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: SuiteModule,
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Compared against plain finite differences of a loss whose transport
    /// plan moves with its inputs, so the error measures the envelope
    /// approximation rather than the tape.
    pub envelope: bool,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

type Forward = Box<dyn for<'g> Fn(&Session<'g>) -> Result<Var<'g>>>;

/// One drawn instance: parameters (inputs included) and the function whose
/// tape gradient is checked. `numeric`, when set, is what finite differences
/// are taken of instead.
pub struct Instance {
    store: ParamStore,
    forward: Forward,
    numeric: Option<Forward>,
}

fn forward<F>(f: F) -> Forward
where
    F: for<'g> Fn(&Session<'g>) -> Result<Var<'g>> + 'static,
{
    Box::new(f)
}

impl Instance {
    fn new(store: ParamStore, f: Forward) -> Self {
        Self {
            store,
            forward: f,
            numeric: None,
        }
    }

    fn with_numeric(mut self, f: Forward) -> Self {
        self.numeric = Some(f);
        self
    }
}

fn eval(store: &ParamStore, f: &Forward) -> Result<f64> {
    let g = Graph::new();
    let s = Session::new(&g, store);
    let y = f(&s)?;
    if !y.value().is_scalar() {
        return Err(Error::invalid("gradient-check case must be scalar-valued"));
    }
    Ok(y.item())
}

/// Worst relative error `|a − n| / max(1, |a|, |n|)` over the sampled
/// coordinates of every parameter.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let numeric_f = inst.numeric.as_ref().unwrap_or(&inst.forward);
    let first = eval(&inst.store, &inst.forward)?;
    let second = eval(&inst.store, &inst.forward)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let grads = {
        let g = Graph::new();
        let s = Session::new(&g, &inst.store);
        let y = (inst.forward)(&s)?;
        g.backward(y)?;
        s.grads()
    };

    let mut work = inst.store.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = inst.store.names().cloned().collect();
    for name in names {
        let len = inst.store.get(&name)?.len();
        for i in sample(rng, len, COORDS.min(len)) {
            let x = inst.store.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = x + STEP;
            let plus = eval(&work, numeric_f)?;
            work.get_mut(&name)?.data_mut()[i] = x - STEP;
            let minus = eval(&work, numeric_f)?;
            work.get_mut(&name)?.data_mut()[i] = x;
            let n = (plus - minus) / (2.0 * STEP);
            let a = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
            if !err.is_finite() {
                return Err(Error::invalid(format!("non-finite gradient for {name}[{i}]")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Reduces any tensor to a scalar with fixed, non-uniform weights, so that
/// invariances such as softmax rows summing to one don't hide errors.
fn probe<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() + 0.5).collect();
    y.graph().constant(Tensor::new(shape, w)?).mul(y)?.sum()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

/// Initializes `specs` and jitters every entry so that zero biases and unit
/// gains are not special points.
fn weights(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = ParamStore::init(specs, rng)?;
    let dist = Normal::new(0.0, 0.1).expect("positive std");
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
    }
    Ok(store)
}

fn inputs(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(*name, randn(rng, shape, 1.0));
    }
    store
}

fn merge(mut a: ParamStore, b: ParamStore) -> ParamStore {
    for (k, v) in b.iter() {
        a.insert(k.clone(), v.clone());
    }
    a
}

struct Case {
    module: SuiteModule,
    name: &'static str,
    tolerance: f64,
    envelope: bool,
    build: fn(&mut ChaCha8Rng) -> Result<Instance>,
}

macro_rules! unary {
    ($name:literal, $shape:expr, |$x:ident| $body:expr) => {
        Case {
            module: SuiteModule::Autodiff,
            name: $name,
            tolerance: PRIMITIVE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    inputs(rng, &[("x", &$shape)]),
                    forward(|s| {
                        let $x = s.param("x")?;
                        probe($body)
                    }),
                ))
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $sx:expr, $sy:expr, |$x:ident, $y:ident| $body:expr) => {
        Case {
            module: SuiteModule::Autodiff,
            name: $name,
            tolerance: PRIMITIVE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    inputs(rng, &[("x", &$sx), ("y", &$sy)]),
                    forward(|s| {
                        let ($x, $y) = (s.param("x")?, s.param("y")?);
                        probe($body)
                    }),
                ))
            },
        }
    };
}

fn primitive_cases() -> Vec<Case> {
    vec![
        binary!("matmul", [3, 4], [4, 5], |x, y| x.matmul(y)?),
        binary!("matmul_t", [3, 4], [5, 4], |x, y| x.matmul_t(y)?),
        binary!("add", [3, 4], [3, 4], |x, y| x.add(y)?),
        binary!("sub", [3, 4], [3, 4], |x, y| x.sub(y)?),
        binary!("mul", [3, 4], [3, 4], |x, y| x.mul(y)?),
        binary!("add_row", [3, 4], [4], |x, y| x.add_row(y)?),
        unary!("scale", [3, 4], |x| x.scale(-1.7)?),
        unary!("add_scalar", [3, 4], |x| x.add_scalar(0.3)?.mul(x)?),
        unary!("transpose", [3, 4], |x| x.transpose()?),
        unary!("reshape", [3, 4], |x| x.reshape(&[2, 6])?),
        unary!("mean_axis0", [3, 4], |x| x.mean(0)?),
        unary!("mean_axis1", [3, 4], |x| x.mean(1)?),
        unary!("sum", [3, 4], |x| x.mul(x)?.sum()?),
        unary!("softmax_axis0", [4, 3], |x| x.softmax(0)?),
        unary!("softmax_axis1", [3, 5], |x| x.softmax(1)?),
        unary!("relu", [3, 4], |x| x.relu()?),
        unary!("gelu", [3, 4], |x| x.gelu()?),
        unary!("sigmoid", [3, 4], |x| x.sigmoid()?),
        Case {
            module: SuiteModule::Autodiff,
            name: "layer_norm",
            tolerance: PRIMITIVE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    inputs(rng, &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])]),
                    forward(|s| probe(s.param("x")?.layer_norm(s.param("gamma")?, s.param("beta")?)?)),
                ))
            },
        },
        binary!("l2_distance", [6], [6], |x, y| x.l2_distance(y)?),
        binary!("cosine_similarity", [6], [6], |x, y| x.cosine_similarity(y)?),
        unary!("normalize", [6], |x| x.normalize()?),
        unary!("slice_cols", [3, 6], |x| x.slice_cols(2, 3)?),
        unary!("gather_rows", [5, 4], |x| x.gather_rows(&[3, 0, 3, 1])?),
        binary!("concat_axis0", [2, 4], [3, 4], |x, y| concat(&[x, y, x], 0)?),
        binary!("concat_axis1", [3, 2], [3, 4], |x, y| concat(&[y, x], 1)?),
        binary!("stack_scalars", [3], [4], |x, y| stack_scalars(&[x.sum()?, y.mul(y)?.sum()?, x.sum()?])?),
        binary!("stack_rows", [4], [4], |x, y| stack_rows(&[x, y, x.mul(y)?])?),
    ]
}

const D: usize = 8;
const HEADS: usize = 2;
const STD: f64 = 0.4;

fn grid() -> PyramidConfig {
    PyramidConfig::new(3, 2, 3).expect("valid pyramid")
}

fn attention_cases() -> Vec<Case> {
    fn attn_store(rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let w = weights(&AttentionParams::specs("attn", D, STD), rng)?;
        Ok(merge(w, inputs(rng, &[("r", &[6, D]), ("q", &[4, D])])))
    }
    vec![
        Case {
            module: SuiteModule::Attention,
            name: "pyramid_pool",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    inputs(rng, &[("r", &[6, D])]),
                    forward(|s| probe(pyramid_pool(s.param("r")?, &grid())?)),
                ))
            },
        },
        Case {
            module: SuiteModule::Attention,
            name: "msa",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    attn_store(rng)?,
                    forward(|s| probe(msa(s.param("r")?, &AttentionParams::bind(s, "attn", HEADS)?)?)),
                ))
            },
        },
        Case {
            module: SuiteModule::Attention,
            name: "psa",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    attn_store(rng)?,
                    forward(|s| probe(psa(s.param("r")?, &AttentionParams::bind(s, "attn", HEADS)?, &grid())?.0)),
                ))
            },
        },
        Case {
            module: SuiteModule::Attention,
            name: "cross_attention",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    attn_store(rng)?,
                    forward(|s| {
                        let p = AttentionParams::bind(s, "attn", HEADS)?;
                        probe(cross_attention(s.param("q")?, s.param("r")?, &p)?.0)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Attention,
            name: "pca",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    attn_store(rng)?,
                    forward(|s| {
                        let p = AttentionParams::bind(s, "attn", HEADS)?;
                        probe(pca(s.param("q")?, s.param("r")?, &p, &grid())?.0)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Attention,
            name: "soa",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&soa_specs("soa", D, STD), rng)?;
                Ok(Instance::new(
                    merge(w, inputs(rng, &[("r", &[6, D]), ("q", &[4, D])])),
                    forward(|s| probe(soa(s, "soa", s.param("q")?, s.param("r")?)?)),
                ))
            },
        },
    ]
}

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        d: D,
        heads: HEADS,
        patch: 2,
        channels: 3,
        vocab_size: 10,
        max_len: 6,
    }
}

fn encoder_cases() -> Vec<Case> {
    vec![
        Case {
            module: SuiteModule::Encoders,
            name: "visual_encode",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let cfg = encoder_config();
                let store = weights(&visual_specs(&cfg, STD), rng)?;
                let image = patchify(&randn(rng, &[4, 6, 3], 1.0), cfg.patch)?;
                Ok(Instance::new(
                    store,
                    forward(move |s| {
                        let b = visual_encode(s, &image, &cfg, 3)?;
                        probe(b.local)?.add(probe(b.global.scale(0.5)?)?)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Encoders,
            name: "text_encode",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let cfg = encoder_config();
                let store = weights(&text_specs(&cfg, STD), rng)?;
                let ids: Vec<usize> = (0..5).map(|_| rand::Rng::random_range(rng, 0..cfg.vocab_size)).collect();
                let text = TokenSequence::from_ids_unchecked(ids);
                Ok(Instance::new(
                    store,
                    forward(move |s| {
                        let b = text_encode(s, &text, &cfg)?;
                        probe(b.local)?.add(probe(b.global.scale(0.5)?)?)
                    }),
                ))
            },
        },
    ]
}

fn composition_cases() -> Vec<Case> {
    vec![
        Case {
            module: SuiteModule::Composition,
            name: "crm_visual_textual",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&crm_specs("crm", D, STD), rng)?;
                Ok(Instance::new(
                    merge(w, inputs(rng, &[("r", &[6, D]), ("q", &[4, D])])),
                    forward(|s| {
                        let r = Tagged::visual(s.param("r")?, grid())?;
                        probe(crm(s, "crm", HEADS, r, Tagged::textual(s.param("q")?))?)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Composition,
            name: "crm_visual_visual",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&crm_specs("crm", D, STD), rng)?;
                Ok(Instance::new(
                    merge(w, inputs(rng, &[("r", &[6, D]), ("q", &[6, D])])),
                    forward(|s| {
                        let r = Tagged::visual(s.param("r")?, grid())?;
                        let q = Tagged::visual(s.param("q")?, grid())?;
                        probe(crm(s, "crm", HEADS, r, q)?)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Composition,
            name: "rac",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&rac_specs("rac", D, STD), rng)?;
                Ok(Instance::new(
                    merge(w, inputs(rng, &[("l", &[6, D]), ("g", &[6, D])])),
                    forward(|s| {
                        let l = Tagged::visual(s.param("l")?, grid())?;
                        let g = Tagged::visual(s.param("g")?, grid())?;
                        probe(rac(s, "rac", HEADS, l, g)?)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Composition,
            name: "compose_query",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&composition_specs(D, STD), rng)?;
                let shapes: [(&str, &[usize]); 4] = [
                    ("ref.local", &[6, D]),
                    ("ref.global", &[6, D]),
                    ("text.local", &[4, D]),
                    ("text.global", &[4, D]),
                ];
                Ok(Instance::new(
                    merge(w, inputs(rng, &shapes)),
                    forward(|s| {
                        let reference = FeatureBundle {
                            local: s.param("ref.local")?,
                            global: s.param("ref.global")?,
                        };
                        let text = FeatureBundle {
                            local: s.param("text.local")?,
                            global: s.param("text.global")?,
                        };
                        probe(compose_query(s, HEADS, &reference, grid(), &text)?.pool()?)
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Composition,
            name: "fuse_target",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&composition_specs(D, STD), rng)?;
                Ok(Instance::new(
                    merge(w, inputs(rng, &[("tar.local", &[6, D]), ("tar.global", &[6, D])])),
                    forward(|s| {
                        let target = FeatureBundle {
                            local: s.param("tar.local")?,
                            global: s.param("tar.global")?,
                        };
                        probe(fuse_target(s, HEADS, &target, grid())?.tokens)
                    }),
                ))
            },
        },
    ]
}

fn vars<'g>(s: &Session<'g>, prefix: &str, n: usize) -> Result<Vec<Var<'g>>> {
    (0..n).map(|i| s.param(&format!("{prefix}{i}"))).collect()
}

fn named(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn vector_inputs(rng: &mut ChaCha8Rng, names: &[String]) -> ParamStore {
    let shapes: Vec<(&str, &[usize])> = names.iter().map(|n| (n.as_str(), &[D][..])).collect();
    inputs(rng, &shapes)
}

/// `1 − Q·Tᵀ` on values.
fn alignment_cost(q: &[Tensor], t: &[Tensor]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = q
        .iter()
        .map(|a| {
            t.iter()
                .map(|b| 1.0 - a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

fn loss_cases() -> Vec<Case> {
    vec![
        Case {
            module: SuiteModule::Losses,
            name: "pool",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                Ok(Instance::new(
                    inputs(rng, &[("x", &[5, D])]),
                    forward(|s| probe(pool(s.param("x")?)?)),
                ))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "triplet_mean",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let mut names = vec!["pos".to_string(), "anchor".to_string()];
                names.extend(named("neg", 3));
                Ok(Instance::new(
                    vector_inputs(rng, &names),
                    forward(|s| triplet_mean(s.param("pos")?, &vars(s, "neg", 3)?, s.param("anchor")?, 0.5)),
                ))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "bidirectional_triplet",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let mut names = vec!["que".to_string(), "tar".to_string()];
                names.extend(named("qneg", 3));
                names.extend(named("tneg", 2));
                let store = vector_inputs(rng, &names);
                let margins = MarginConfig {
                    m: 0.8,
                    ..MarginConfig::default()
                };
                let m_a = adaptive_margin(similarity_sqt(store.get("que")?, store.get("tar")?)?, &margins)?;
                Ok(Instance::new(
                    store,
                    forward(move |s| {
                        let (q, t) = (s.param("que")?, s.param("tar")?);
                        Ok(bidirectional_triplet(q, t, &vars(s, "qneg", 3)?, &vars(s, "tneg", 2)?, &LossWeights::default(), &margins)?.0)
                    }),
                )
                .with_numeric(forward(move |s| {
                    let (q, t) = (s.param("que")?, s.param("tar")?);
                    let (qn, tn) = (vars(s, "qneg", 3)?, vars(s, "tneg", 2)?);
                    bidirectional_triplet_with(q, t, &qn, &tn, &LossWeights::default(), margins.m, m_a)
                })))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "reconstruction",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let w = weights(&reconstruction_specs(D, STD), rng)?;
                let names = ["query", "tar", "tar_global"].map(String::from);
                Ok(Instance::new(
                    merge(w, vector_inputs(rng, &names)),
                    forward(|s| {
                        let (img, txt) = reconstruction_heads(s, s.param("query")?)?;
                        reconstruct_loss(img, txt, s.param("tar")?, s.param("tar_global")?, &LossWeights::default())
                    }),
                ))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "alignment_fixed_plan",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let store = alignment_inputs(rng);
                let cfg = SinkhornConfig::default();
                let unit = |t: &Tensor| {
                    let n = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    Tensor::vector(t.data().iter().map(|v| v / n).collect())
                };
                let qs: Vec<Tensor> = named("q", 4).iter().map(|n| store.get(n).map(unit)).collect::<Result<_>>()?;
                let ts: Vec<Tensor> = named("t", 4).iter().map(|n| store.get(n).map(unit)).collect::<Result<_>>()?;
                let gamma = sinkhorn(&alignment_cost(&qs, &ts)?, &[0.25; 4], &[0.25; 4], &cfg)?.gamma;
                Ok(Instance::new(store, forward(move |s| alignment(s, &cfg, 1.0))).with_numeric(forward(
                    move |s| {
                        let q = stack_rows(&normalized(s, "q")?)?;
                        let t = stack_rows(&normalized(s, "t")?)?;
                        alignment_loss_with_plan(q, t, &gamma, 1.0)
                    },
                )))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "alignment_envelope",
            tolerance: ENVELOPE_TOLERANCE,
            envelope: true,
            build: |rng| {
                let cfg = SinkhornConfig::default();
                Ok(Instance::new(alignment_inputs(rng), forward(move |s| alignment(s, &cfg, 1.0))))
            },
        },
        Case {
            module: SuiteModule::Losses,
            name: "total_loss_full",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| full_loss_instance(rng, false),
        },
        Case {
            module: SuiteModule::Losses,
            name: "total_loss_full_envelope",
            tolerance: ENVELOPE_TOLERANCE,
            envelope: true,
            build: |rng| full_loss_instance(rng, true),
        },
        Case {
            module: SuiteModule::Losses,
            name: "total_loss_triplet_only",
            tolerance: COMPOSITE_TOLERANCE,
            envelope: false,
            build: |rng| {
                let names: Vec<String> = named("q", 3).into_iter().chain(named("t", 3)).collect();
                Ok(Instance::new(
                    vector_inputs(rng, &names),
                    forward(|s| {
                        let samples = (0..3)
                            .map(|i| {
                                let q = s.param(&format!("q{i}"))?;
                                let t = s.param(&format!("t{i}"))?;
                                Ok(SampleTerms {
                                    query: q,
                                    target: t,
                                    target_global: t,
                                    counterfactuals: Vec::new(),
                                    recon_image: q,
                                    recon_text: q,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let margins = MarginConfig {
                            m: 0.8,
                            ..MarginConfig::default()
                        };
                        Ok(total_loss(
                            &samples,
                            Objective::TripletOnly,
                            &LossWeights::default(),
                            &margins,
                            &SinkhornConfig::default(),
                        )?
                        .total)
                    }),
                ))
            },
        },
    ]
}

fn alignment_inputs(rng: &mut ChaCha8Rng) -> ParamStore {
    merge(vector_inputs(rng, &named("q", 4)), vector_inputs(rng, &named("t", 4)))
}

fn alignment<'g>(s: &Session<'g>, cfg: &SinkhornConfig, lambda_a: f64) -> Result<Var<'g>> {
    let q = stack_rows(&normalized(s, "q")?)?;
    let t = stack_rows(&normalized(s, "t")?)?;
    Ok(alignment_loss(q, t, cfg, lambda_a)?.0)
}

/// Two-query toy batch under the full objective. The numeric side holds the
/// margins and reconstruction anchors at their base values; the plan is held
/// too unless `live_plan`.
fn full_loss_instance(rng: &mut ChaCha8Rng, live_plan: bool) -> Result<Instance> {
    let mut specs = composition_specs(D, STD);
    specs.extend(reconstruction_specs(D, STD));
    let w = weights(&specs, rng)?;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for i in 0..2 {
        for (part, n) in [("ref", 6), ("txt", 4), ("tar", 6), ("cf", 4)] {
            for level in ["local", "global"] {
                shapes.push((format!("{part}{i}.{level}"), vec![n, D]));
            }
        }
    }
    let shapes: Vec<(&str, &[usize])> = shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let store = merge(w, inputs(rng, &shapes));
    let (margins, weights, sk) = (MarginConfig::default(), LossWeights::default(), SinkhornConfig::default());
    let base = {
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        Detached::capture(&toy_batch(&s)?, Objective::Full, &margins, &sk)?
    };
    Ok(Instance::new(
        store,
        forward(move |s| Ok(total_loss(&toy_batch(s)?, Objective::Full, &weights, &margins, &sk)?.total)),
    )
    .with_numeric(forward(move |s| {
        let samples = toy_batch(s)?;
        let mut detached = base.clone();
        if live_plan {
            detached.plan = Detached::capture(&samples, Objective::Full, &margins, &sk)?.plan;
        }
        Ok(total_loss_with(&samples, &detached, Objective::Full, &weights, &margins)?.total)
    })))
}

fn bundle<'g>(s: &Session<'g>, name: &str) -> Result<FeatureBundle<'g>> {
    Ok(FeatureBundle {
        local: s.param(&format!("{name}.local"))?,
        global: s.param(&format!("{name}.global"))?,
    })
}

/// Two samples run through composition, fusion and the reconstruction heads,
/// each with one counterfactual text.
fn toy_batch<'g>(s: &Session<'g>) -> Result<Vec<SampleTerms<'g>>> {
    (0..2)
        .map(|i| {
            let reference = bundle(s, &format!("ref{i}"))?;
            let target = bundle(s, &format!("tar{i}"))?;
            let query = compose_query(s, HEADS, &reference, grid(), &bundle(s, &format!("txt{i}"))?)?.pool()?;
            let cf = compose_query(s, HEADS, &reference, grid(), &bundle(s, &format!("cf{i}"))?)?.pool()?;
            let (recon_image, recon_text) = reconstruction_heads(s, query)?;
            Ok(SampleTerms {
                query,
                target: fuse_target(s, HEADS, &target, grid())?.pool()?,
                target_global: pool(target.global)?,
                counterfactuals: vec![cf],
                recon_image,
                recon_text,
            })
        })
        .collect()
}

fn normalized<'g>(s: &Session<'g>, prefix: &str) -> Result<Vec<Var<'g>>> {
    vars(s, prefix, 4)?.into_iter().map(|v| v.normalize()).collect()
}

fn cases() -> Vec<Case> {
    let mut v = primitive_cases();
    v.extend(attention_cases());
    v.extend(encoder_cases());
    v.extend(composition_cases());
    v.extend(loss_cases());
    v
}

/// Names of every case, in suite order.
pub fn case_names(module: Option<SuiteModule>) -> Vec<(SuiteModule, &'static str)> {
    cases()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .map(|c| (c.module, c.name))
        .collect()
}

/// Runs one named case over `INSTANCES` seeded draws; instance `k` of a case
/// uses seed `k`.
pub fn run_case(name: &str) -> Result<CheckResult> {
    let case = cases()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown gradient-check case {name:?}")))?;
    run(&case)
}

fn run(case: &Case) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let inst = (case.build)(&mut rng)?;
        worst = worst.max(check_instance(&inst, &mut rng)?);
    }
    Ok(CheckResult {
        module: case.module,
        name: case.name.to_string(),
        instances: INSTANCES,
        max_error: worst,
        tolerance: case.tolerance,
        envelope: case.envelope,
    })
}

pub fn run_suite(module: Option<SuiteModule>) -> Result<Vec<CheckResult>> {
    cases()
        .iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .map(run)
        .collect()
}
