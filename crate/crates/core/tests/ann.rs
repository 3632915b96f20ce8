mod common;

use common::{brute_force, unit_vectors};
use egcl::ann::{sigmoid_distance, HnswIndex, HnswParams};
use egcl::levels::Level;
use egcl::tensor::dot;
use proptest::prelude::*;

fn build(vecs: &[Vec<f64>], params: &HnswParams) -> HnswIndex {
    let items = vecs.iter().cloned().enumerate().map(|(i, v)| (i as u32, v)).collect();
    HnswIndex::from_vectors(Level::P2, items, params).unwrap()
}

fn recall(seed: u64, params: &HnswParams, n: usize, queries: usize) -> f64 {
    let vecs = unit_vectors(seed, 0, n, 16);
    let idx = build(&vecs, params);
    let qs = unit_vectors(seed, 1, queries, 16);
    let hits = qs
        .iter()
        .filter(|q| idx.nearest(q).unwrap().exemplar_id == brute_force(&vecs, q))
        .count();
    hits as f64 / queries as f64
}

#[test]
fn recall_at_one_on_random_unit_vectors() {
    for seed in 0..5 {
        let params = HnswParams {
            seed,
            ..Default::default()
        };
        let r = recall(seed, &params, 1000, 200);
        assert!(r >= 0.95, "seed {seed}: recall {r}");
    }
}

#[test]
fn flat_graph_with_full_beam_is_exact() {
    let n = 300;
    let params = HnswParams {
        ef_search: n,
        level_lambda: 0.0,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(recall(9, &params, n, 100), 1.0);
}

#[test]
fn upper_layer_fraction_matches_geometric_draw() {
    let n = 4000;
    let params = HnswParams::default();
    let idx = build(&unit_vectors(2, 0, n, 4), &params);
    let above = idx.node_layers().iter().filter(|l| **l >= 1).count() as f64;
    let p = (-1.0f64 / params.level_lambda).exp();
    assert!((p - 0.125).abs() < 1e-12);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((above - n as f64 * p).abs() <= 3.0 * sigma, "{above} nodes above layer 0");
}

#[test]
fn sigmoid_and_inner_product_navigate_identically() {
    let vecs = unit_vectors(5, 0, 500, 16);
    let idx = build(&vecs, &HnswParams::default());
    for q in unit_vectors(5, 1, 50, 16) {
        let a = idx.visit_order(&q, &|e| sigmoid_distance(dot(&q, e))).unwrap();
        let b = idx.visit_order(&q, &|e| -dot(&q, e)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn average_distance_uses_top_layer() {
    let vecs = unit_vectors(6, 0, 100, 8);
    let idx = build(&vecs, &HnswParams::default());
    let q = &unit_vectors(6, 1, 1, 8)[0];
    let top = idx.top_layer_ids();
    assert!(!top.is_empty());
    let expect: f64 = top
        .iter()
        .map(|id| sigmoid_distance(dot(q, &vecs[*id as usize])))
        .sum::<f64>()
        / top.len() as f64;
    assert!((idx.average_distance(q).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn rejects_dimension_mismatch() {
    let idx = build(&unit_vectors(1, 0, 10, 4), &HnswParams::default());
    assert!(idx.nearest(&[1.0, 0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graphs_are_symmetric_and_contained(seed in 0u64..1000, n in 1usize..120, m in 2usize..6) {
        let params = HnswParams { m, ef_construction: 2 * m, seed, ..Default::default() };
        let idx = build(&unit_vectors(seed, 0, n, 6), &params);
        prop_assert!(idx.check_structure().is_ok());
        let top = *idx.node_layers().iter().max().unwrap();
        let entry = idx.entry_point().unwrap();
        prop_assert_eq!(idx.node_layers()[entry as usize], top);
        let back = HnswIndex::read(idx.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, idx);
    }
}
