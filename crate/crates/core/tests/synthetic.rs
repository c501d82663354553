use std::collections::HashSet;

use cir_core::dataset::{Dataset, Split};
use cir_core::synthetic::{color_rgb, generate_synthetic, shape_mask, SyntheticSpec};
use cir_core::Tensor;

/// (color name, shape name) per cell, read back from pixels.
type Decoded = Vec<(String, String)>;

fn decode(img: &Tensor, spec: &SyntheticSpec) -> Decoded {
    let (g, p) = (spec.grid, spec.patch);
    let side = g * p;
    let px = |y: usize, x: usize| -> [f64; 3] {
        let o = (y * side + x) * 3;
        [img.data()[o], img.data()[o + 1], img.data()[o + 2]]
    };
    let mut out = Vec::new();
    for gr in 0..g {
        for gc in 0..g {
            let mut mask = Vec::new();
            let mut rgb = None;
            for y in 0..p {
                for x in 0..p {
                    let v = px(gr * p + y, gc * p + x);
                    let lit = v != [0.0; 3];
                    mask.push(lit);
                    if lit {
                        assert!(rgb.is_none_or(|c| c == v), "two colors in one cell");
                        rgb = Some(v);
                    }
                }
            }
            let rgb = rgb.expect("empty cell");
            let color = spec.colors.iter().find(|c| color_rgb(c).unwrap() == rgb).expect("unknown color");
            let shape = spec
                .shapes
                .iter()
                .find(|s| shape_mask(s, p).unwrap() == mask)
                .expect("unknown shape");
            out.push((color.clone(), shape.clone()));
        }
    }
    out
}

/// Applies the edit a text describes, reading attribute names off the words:
/// the first color and shape name the cells to change, a second color or
/// shape gives the new value.
fn apply(text: &str, grid: &Decoded, spec: &SyntheticSpec) -> Decoded {
    let colors: Vec<&str> = text.split(' ').filter(|w| spec.colors.iter().any(|c| c == w)).collect();
    let shapes: Vec<&str> = text.split(' ').filter(|w| spec.shapes.iter().any(|s| s == w)).collect();
    let (c, s) = (colors[0], shapes[0]);
    let (nc, ns) = match (colors.len(), shapes.len()) {
        (2, 1) => (colors[1], s),
        (1, 2) => (c, shapes[1]),
        other => panic!("cannot parse {text:?}: {other:?}"),
    };
    grid.iter()
        .map(|(gc, gs)| {
            if gc == c && gs == s {
                (nc.to_string(), ns.to_string())
            } else {
                (gc.clone(), gs.clone())
            }
        })
        .collect()
}

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        train_queries: 100,
        seed,
        ..Default::default()
    }
}

#[test]
fn every_target_is_its_text_applied_to_its_reference() {
    for seed in [0, 1, 2] {
        let s = spec(seed);
        let d = generate_synthetic(s.clone()).unwrap();
        for q in &d.queries {
            let reference = decode(&d.images[q.reference_id], &s);
            let target = decode(&d.images[q.target_id], &s);
            assert_eq!(apply(&q.text, &reference, &s), target, "query {}: {}", q.query_id, q.text);
            assert_ne!(reference, target);
            assert_eq!(d.vocab.encode(&q.text).unwrap().ids(), q.tokens.as_slice());
        }
    }
}

#[test]
fn images_are_unique_and_splits_disjoint() {
    let s = spec(4);
    let d = generate_synthetic(s.clone()).unwrap();
    let decoded: Vec<Decoded> = d.images.iter().map(|i| decode(i, &s)).collect();
    let unique: HashSet<&Decoded> = decoded.iter().collect();
    assert_eq!(unique.len(), decoded.len());

    let mut owner = vec![None; d.images.len()];
    for q in &d.queries {
        for id in [q.reference_id, q.target_id] {
            assert!(owner[id].is_none_or(|o| o == q.split), "image {id} shared across splits");
            owner[id] = Some(q.split);
        }
    }
    for split in [Split::Val, Split::Test] {
        let gallery: HashSet<usize> = d.gallery(split).unwrap().iter().copied().collect();
        assert_eq!(gallery.len(), 100);
        assert_eq!(d.split_queries(split).count(), 95);
        for q in d.split_queries(split) {
            assert!(gallery.contains(&q.target_id) && gallery.contains(&q.reference_id));
        }
    }
    assert_eq!(d.split_queries(Split::Train).count(), 100);
}

#[test]
fn generation_is_deterministic() {
    let a: Dataset = generate_synthetic(spec(9)).unwrap();
    let b = generate_synthetic(spec(9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.queries, generate_synthetic(spec(10)).unwrap().queries);
}

#[test]
fn custom_attributes_and_templates() {
    let s = SyntheticSpec {
        grid: 3,
        patch: 5,
        colors: vec!["red".into(), "blue".into(), "yellow".into()],
        shapes: vec!["square".into(), "diamond".into(), "cross".into()],
        templates: vec![
            "make the {color} {shape} {new_color}".into(),
            "swap {color} {shape} for a {new_shape}".into(),
            "turn {color} {shape} into {new_shape}".into(),
        ],
        family_size: 5,
        train_queries: 12,
        val_gallery: 10,
        test_gallery: 10,
        seed: 1,
    };
    let d = generate_synthetic(s.clone()).unwrap();
    assert_eq!(d.images[0].shape(), &[15, 15, 3]);
    for q in &d.queries {
        let r = decode(&d.images[q.reference_id], &s);
        assert_eq!(apply(&q.text, &r, &s), decode(&d.images[q.target_id], &s));
    }
}

#[test]
fn rejects_bad_specs() {
    for bad in [
        SyntheticSpec { grid: 0, ..Default::default() },
        SyntheticSpec { val_gallery: 90, family_size: 20, ..Default::default() },
        SyntheticSpec { shapes: vec!["square".into(), "blob".into()], ..Default::default() },
        SyntheticSpec { templates: vec!["change {color} to {new_color}".into()], ..Default::default() },
        // At two pixels a circle and a square cover the same pixels.
        SyntheticSpec { patch: 2, ..Default::default() },
    ] {
        assert!(generate_synthetic(bad).is_err());
    }
}
