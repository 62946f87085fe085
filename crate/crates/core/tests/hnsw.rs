use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multimatch::ann::{build_index, exact_search, snapshot, AnnIndex, HnswParams};
use multimatch::EntityRef;

fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn items(data: &[Vec<f32>]) -> Vec<(EntityRef, &[f32])> {
    data.iter()
        .enumerate()
        .map(|(r, v)| (EntityRef::new(0, r as u32), v.as_slice()))
        .collect()
}

#[test]
fn build_cost_grows_roughly_linearly() {
    let params = HnswParams::default();
    let small = unit_vectors(5_000, 16, 1);
    let large = unit_vectors(10_000, 16, 1);
    let a = build_index(&items(&small), &params).unwrap().build_distance_evals() as f64;
    let b = build_index(&items(&large), &params).unwrap().build_distance_evals() as f64;
    assert!(b / a <= 2.6, "doubling N multiplied distance evals by {:.2}", b / a);
}

#[test]
fn recall_rises_with_ef() {
    let data = unit_vectors(4_000, 24, 2);
    let queries = unit_vectors(600, 24, 3);
    let it = items(&data);
    let index = build_index(&it, &HnswParams::default()).unwrap();
    let truth: Vec<EntityRef> = queries.iter().map(|q| exact_search(&it, q, 1).unwrap()[0].entity).collect();
    let mut last = 0.0;
    for ef in [16, 32, 64, 128] {
        let hits = queries
            .iter()
            .zip(&truth)
            .filter(|(q, t)| index.search(q, 1, ef).unwrap()[0].entity == **t)
            .count();
        let recall = hits as f64 / queries.len() as f64;
        assert!(recall >= last, "recall fell to {recall} at ef {ef}");
        last = recall;
    }
    assert!(last >= 0.95, "recall at ef 128 is {last}");
}

#[test]
fn exhaustive_ef_is_exact() {
    let data = unit_vectors(50, 8, 4);
    let it = items(&data);
    let index = build_index(&it, &HnswParams::default()).unwrap();
    for q in unit_vectors(20, 8, 5) {
        let got = index.search(&q, 5, 50).unwrap();
        let want = exact_search(&it, &q, 5).unwrap();
        assert_eq!(
            got.iter().map(|h| h.entity).collect::<Vec<_>>(),
            want.iter().map(|h| h.entity).collect::<Vec<_>>()
        );
    }
}

#[test]
fn degree_caps_hold() {
    let data = unit_vectors(2_000, 12, 6);
    let params = HnswParams { m: 8, ..HnswParams::default() };
    let index = build_index(&items(&data), &params).unwrap();
    for node in 0..index.len() {
        for layer in 0..=index.level(node) {
            let cap = if layer == 0 { 16 } else { 8 };
            let n = index.neighbors(node, layer).unwrap();
            assert!(n.len() <= cap, "node {node} layer {layer} has {} links", n.len());
            assert!(!n.contains(&(node as u32)));
        }
    }
}

#[test]
fn same_seed_same_graph() {
    let data = unit_vectors(1_500, 16, 7);
    let params = HnswParams { seed: 11, ..HnswParams::default() };
    let a = build_index(&items(&data), &params).unwrap();
    let b = build_index(&items(&data), &params).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    snapshot::write_index(&a, &mut ba).unwrap();
    snapshot::write_index(&b, &mut bb).unwrap();
    assert_eq!(ba, bb);
}

#[test]
fn snapshot_round_trip_answers_identically() {
    let data = unit_vectors(1_000, 16, 8);
    let index = build_index(&items(&data), &HnswParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    snapshot::save(&index, &path).unwrap();
    let loaded = snapshot::load(&path).unwrap();
    for q in unit_vectors(50, 16, 9) {
        assert_eq!(index.search(&q, 3, 32).unwrap(), loaded.search(&q, 3, 32).unwrap());
    }
}

#[test]
fn small_tables_use_exact_search() {
    let data = unit_vectors(100, 8, 10);
    let it = items(&data);
    let index = AnnIndex::build_auto(&it, &HnswParams::default()).unwrap();
    assert!(matches!(index, AnnIndex::Exact(_)));
    let q = &unit_vectors(1, 8, 11)[0];
    assert_eq!(index.search(q, 4, 1).unwrap(), exact_search(&it, q, 4).unwrap());
}
