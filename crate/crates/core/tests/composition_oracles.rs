mod common;

use cir_core::attention::PyramidConfig;
use cir_core::composition::{
    compose_local, compose_query, composition_specs, crm, crm_specs, fuse_target, rac, rac_specs, Stage, Tagged,
    ABSORB_PREFIX, GLOBAL_PREFIX, LOCAL_PREFIX, TARGET_PREFIX,
};
use cir_core::encoders::FeatureBundle;
use cir_core::params::{ParamSpec, ParamStore, Session};
use cir_core::Graph;
use common::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const D: usize = 8;
const HEADS: usize = 2;

/// Initializes and then jitters every parameter so zero biases and unit
/// gains are exercised too.
fn jittered(specs: &[ParamSpec], r: &mut ChaCha8Rng) -> ParamStore {
    let mut st = ParamStore::init(specs, r).unwrap();
    let n = Normal::new(0.0, 0.2).unwrap();
    for (_, t) in st.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += n.sample(r));
    }
    st
}

fn visual(x: &Mat, levels: usize, gh: usize, gw: usize) -> Tokens {
    Tokens { x: x.clone(), grid: Some((levels, gh, gw)) }
}

fn text(x: &Mat) -> Tokens {
    Tokens { x: x.clone(), grid: None }
}

#[test]
fn crm_matches_transcription() {
    for seed in 0..6 {
        let mut r = rng(seed);
        let st = jittered(&crm_specs("c", D, 0.4), &mut r);
        let (gh, gw) = (2, 3);
        let x = randn(&mut r, gh * gw, D, 1.0);
        let q_text = randn(&mut r, 4, D, 1.0);
        let q_vis = randn(&mut r, gh * gw, D, 1.0);
        let pyr = PyramidConfig::new(3, gh, gw).unwrap();

        let g = Graph::new();
        let s = Session::frozen(&g, &st);
        let rv = Tagged::visual(g.constant(to_tensor(&x)), pyr).unwrap();

        let got = crm(&s, "c", HEADS, rv, Tagged::textual(g.constant(to_tensor(&q_text)))).unwrap();
        let want = common::crm(&st, "c", HEADS, &visual(&x, 3, gh, gw), &text(&q_text));
        assert!(max_abs_diff(&to_mat(&got.value()), &want) < 1e-10, "seed {seed} visual/text");

        let qv = Tagged::visual(g.constant(to_tensor(&q_vis)), pyr).unwrap();
        let got = crm(&s, "c", HEADS, rv, qv).unwrap();
        let want = common::crm(&st, "c", HEADS, &visual(&x, 3, gh, gw), &visual(&q_vis, 3, gh, gw));
        assert!(max_abs_diff(&to_mat(&got.value()), &want) < 1e-10, "seed {seed} visual/visual");
        assert_eq!(got.shape(), vec![gh * gw, D]);
    }
}

#[test]
fn rac_matches_transcription() {
    for seed in 0..6 {
        let mut r = rng(100 + seed);
        let st = jittered(&rac_specs("r", D, 0.4), &mut r);
        let l = randn(&mut r, 9, D, 1.0);
        let gl = randn(&mut r, 9, D, 1.0);
        let pyr = PyramidConfig::new(3, 3, 3).unwrap();
        let g = Graph::new();
        let s = Session::frozen(&g, &st);
        let got = rac(
            &s,
            "r",
            HEADS,
            Tagged::visual(g.constant(to_tensor(&l)), pyr).unwrap(),
            Tagged::visual(g.constant(to_tensor(&gl)), pyr).unwrap(),
        )
        .unwrap();
        let want = common::rac(&st, "r", HEADS, &visual(&l, 3, 3, 3), &visual(&gl, 3, 3, 3));
        assert!(max_abs_diff(&to_mat(&got.value()), &want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn rac_rejects_mismatched_token_counts() {
    let mut r = rng(1);
    let st = jittered(&rac_specs("r", D, 0.4), &mut r);
    let g = Graph::new();
    let s = Session::frozen(&g, &st);
    let l = Tagged::textual(g.constant(to_tensor(&randn(&mut r, 4, D, 1.0))));
    let gg = Tagged::textual(g.constant(to_tensor(&randn(&mut r, 5, D, 1.0))));
    assert!(rac(&s, "r", HEADS, l, gg).is_err());
}

#[test]
fn visual_tag_rejects_wrong_grid() {
    let g = Graph::new();
    let x = g.constant(to_tensor(&randn(&mut rng(0), 5, D, 1.0)));
    assert!(Tagged::visual(x, PyramidConfig::new(3, 2, 3).unwrap()).is_err());
}

#[test]
fn query_pipeline_matches_transcription() {
    let mut r = rng(7);
    let st = jittered(&composition_specs(D, 0.4), &mut r);
    let (gh, gw) = (2, 2);
    let ref_l = randn(&mut r, 4, D, 1.0);
    let ref_g = randn(&mut r, 4, D, 1.0);
    let txt_l = randn(&mut r, 5, D, 1.0);
    let txt_g = randn(&mut r, 5, D, 1.0);
    let pyr = PyramidConfig::new(3, gh, gw).unwrap();

    let g = Graph::new();
    let s = Session::frozen(&g, &st);
    let reference = FeatureBundle {
        local: g.constant(to_tensor(&ref_l)),
        global: g.constant(to_tensor(&ref_g)),
    };
    let query = FeatureBundle {
        local: g.constant(to_tensor(&txt_l)),
        global: g.constant(to_tensor(&txt_g)),
    };
    let c1 = compose_local(&s, HEADS, &reference, pyr, &query).unwrap();
    let c3 = compose_query(&s, HEADS, &reference, pyr, &query).unwrap();
    assert_eq!(c1.stage, Stage::LocalComposition);
    assert_eq!(c3.stage, Stage::GlobalComposition);

    let o1 = common::crm(&st, LOCAL_PREFIX, HEADS, &visual(&ref_l, 3, gh, gw), &text(&txt_l));
    let o2 = common::rac(&st, ABSORB_PREFIX, HEADS, &visual(&o1, 3, gh, gw), &visual(&ref_g, 3, gh, gw));
    let o3 = common::crm(&st, GLOBAL_PREFIX, HEADS, &visual(&o2, 3, gh, gw), &text(&txt_g));
    assert!(max_abs_diff(&to_mat(&c1.tokens.value()), &o1) < 1e-10);
    assert!(max_abs_diff(&to_mat(&c3.tokens.value()), &o3) < 1e-10);

    let pooled = vec_of(&c3.pool().unwrap().value());
    let want = unit(&mean_rows(&o3));
    assert!(pooled.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10));

    let target = fuse_target(&s, HEADS, &reference, pyr).unwrap();
    assert_eq!(target.stage, Stage::TargetFusion);
    let ot = common::rac(&st, TARGET_PREFIX, HEADS, &visual(&ref_l, 3, gh, gw), &visual(&ref_g, 3, gh, gw));
    assert!(max_abs_diff(&to_mat(&target.tokens.value()), &ot) < 1e-10);
}
