mod common;

use cir_core::attention::{cross_attention, msa, pca, psa, AttentionParams, PyramidConfig};
use cir_core::params::{ParamStore, Session};
use cir_core::Graph;
use common::*;
use proptest::prelude::*;

const D: usize = 8;

fn store(seed: u64) -> ParamStore {
    ParamStore::init(&AttentionParams::specs("a", D, 0.5), &mut rng(seed)).unwrap()
}

fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| m[i].clone()).collect()
}

#[test]
fn pooling_matrix_matches_window_enumeration() {
    for (levels, gh, gw) in [(1, 3, 3), (2, 4, 4), (3, 4, 4), (4, 3, 5), (5, 2, 6), (3, 1, 1)] {
        let cfg = PyramidConfig::new(levels, gh, gw).unwrap();
        let n = gh * gw;
        // Pooling an identity recovers the operator's own columns.
        let eye: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let oracle = pyramid_pool(&eye, levels, gh, gw);
        let got = to_mat(&cfg.pooling_matrix());
        assert!(max_abs_diff(&got, &oracle) < 1e-15, "levels {levels} grid {gh}x{gw}");
    }
}

#[test]
fn attention_variants_match_transcription() {
    let mut r = rng(11);
    for heads in [1, 2, 4] {
        let st = store(heads as u64);
        let oracle = Attn::load(&st, "a", heads);
        let x = randn(&mut r, 6, D, 1.0);
        let y = randn(&mut r, 4, D, 1.0);
        let cfg = PyramidConfig::new(3, 2, 3).unwrap();
        let pooled = add(&x, &pyramid_pool(&x, 3, 2, 3));

        let g = Graph::new();
        let s = Session::frozen(&g, &st);
        let p = AttentionParams::bind(&s, "a", heads).unwrap();
        let (xv, yv) = (g.constant(to_tensor(&x)), g.constant(to_tensor(&y)));

        let cases = [
            (to_mat(&msa(xv, &p).unwrap().value()), oracle.attend(&x, &x, &x)),
            (to_mat(&psa(xv, &p, &cfg).unwrap().0.value()), oracle.attend(&pooled, &x, &x)),
            (to_mat(&cross_attention(yv, xv, &p).unwrap().0.value()), oracle.attend(&y, &x, &x)),
            (to_mat(&pca(yv, xv, &p, &cfg).unwrap().0.value()), oracle.attend(&y, &pooled, &x)),
        ];
        for (i, (got, want)) in cases.iter().enumerate() {
            assert!(max_abs_diff(got, want) < 1e-12, "variant {i}, {heads} heads");
        }
    }
}

#[test]
fn single_level_pyramid_reduces_to_plain_attention() {
    let st = store(3);
    let mut r = rng(4);
    let x = randn(&mut r, 9, D, 1.0);
    let y = randn(&mut r, 5, D, 1.0);
    let cfg = PyramidConfig::new(1, 3, 3).unwrap();
    let g = Graph::new();
    let s = Session::frozen(&g, &st);
    let p = AttentionParams::bind(&s, "a", 2).unwrap();
    let (xv, yv) = (g.constant(to_tensor(&x)), g.constant(to_tensor(&y)));
    let a = to_mat(&psa(xv, &p, &cfg).unwrap().0.value());
    let b = to_mat(&msa(xv, &p).unwrap().value());
    assert!(max_abs_diff(&a, &b) <= 1e-12);
    let a = to_mat(&pca(yv, xv, &p, &cfg).unwrap().0.value());
    let b = to_mat(&cross_attention(yv, xv, &p).unwrap().0.value());
    assert!(max_abs_diff(&a, &b) <= 1e-12);
}

#[test]
fn psa_is_not_permutation_equivariant() {
    let st = store(5);
    let mut r = rng(6);
    let x = randn(&mut r, 4, D, 1.0);
    let perm = [3, 1, 2, 0];
    let cfg = PyramidConfig::new(2, 2, 2).unwrap();
    let g = Graph::new();
    let s = Session::frozen(&g, &st);
    let p = AttentionParams::bind(&s, "a", 2).unwrap();
    let out = to_mat(&psa(g.constant(to_tensor(&x)), &p, &cfg).unwrap().0.value());
    let out_p = to_mat(&psa(g.constant(to_tensor(&permute_rows(&x, &perm))), &p, &cfg).unwrap().0.value());
    assert!(max_abs_diff(&permute_rows(&out, &perm), &out_p) > 1e-3);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let st = store(0);
    let g = Graph::new();
    let s = Session::frozen(&g, &st);
    assert!(AttentionParams::bind(&s, "a", 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_naive(seed in 0u64..1000, n in 1usize..6, k in 1usize..6, m in 1usize..6) {
        let mut r = rng(seed);
        let a = randn(&mut r, n, k, 1.0);
        let b = randn(&mut r, k, m, 1.0);
        let g = Graph::new();
        let got = g.constant(to_tensor(&a)).matmul(g.constant(to_tensor(&b))).unwrap().value();
        prop_assert!(max_abs_diff(&to_mat(&got), &matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn msa_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..8) {
        let st = store(seed);
        let mut r = rng(seed + 1);
        let x = randn(&mut r, n, D, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + (seed as usize) % (n - 1));
        let g = Graph::new();
        let s = Session::frozen(&g, &st);
        let p = AttentionParams::bind(&s, "a", 2).unwrap();
        let out = to_mat(&msa(g.constant(to_tensor(&x)), &p).unwrap().value());
        let out_p = to_mat(&msa(g.constant(to_tensor(&permute_rows(&x, &perm))), &p).unwrap().value());
        prop_assert!(max_abs_diff(&permute_rows(&out, &perm), &out_p) <= 1e-10);
    }

    #[test]
    fn pooling_rows_average_in_bounds(levels in 1usize..5, gh in 1usize..5, gw in 1usize..5) {
        // Every window average has unit weight, so each row of the operator
        // sums to the number of window sizes.
        let m = PyramidConfig::new(levels, gh, gw).unwrap().pooling_matrix();
        for i in 0..gh * gw {
            let s: f64 = m.row(i).iter().sum();
            prop_assert!((s - (levels - 1) as f64).abs() < 1e-12);
            prop_assert!(m.row(i).iter().all(|v| *v >= 0.0));
        }
    }
}
