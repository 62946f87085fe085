//! Nearest-neighbor search over unit vectors under cosine distance: an HNSW
//! graph for large tables and an exact scan for small ones.

mod hnsw;
pub mod snapshot;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use hnsw::HnswIndex;

use crate::embed::cosine_distance;
use crate::error::{Error, Result};
use crate::tables::EntityRef;

/// Tables with fewer rows than this are searched exhaustively.
pub const DEFAULT_EXACT_THRESHOLD: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Maximum links per node on upper layers; layer 0 allows `2·m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Level multiplier `mL`; `None` means `1/ln(m)`.
    pub level_lambda: Option<f64>,
    pub seed: u64,
    /// Row count below which an exact index is used instead.
    pub exact_threshold: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            level_lambda: None,
            seed: 0,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config("hnsw: m must be >= 2".into()));
        }
        if self.ef_construction < self.m {
            return Err(Error::Config("hnsw: ef_construction must be >= m".into()));
        }
        if self.ef_search < 1 {
            return Err(Error::Config("hnsw: ef_search must be >= 1".into()));
        }
        if let Some(l) = self.level_lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config("hnsw: level_lambda must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn level_multiplier(&self) -> f64 {
        self.level_lambda
            .unwrap_or_else(|| 1.0 / (self.m as f64).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub entity: EntityRef,
    pub distance: f32,
}

impl SearchHit {
    /// Ascending distance, ties broken by [`EntityRef`] order.
    pub fn order(a: &SearchHit, b: &SearchHit) -> Ordering {
        a.distance
            .total_cmp(&b.distance)
            .then(a.entity.cmp(&b.entity))
    }
}

/// Exact top-`k` by full scan.
pub fn exact_search(items: &[(EntityRef, &[f32])], query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
    if items.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut hits = Vec::with_capacity(items.len());
    for (entity, v) in items {
        if v.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                found: v.len(),
            });
        }
        hits.push(SearchHit {
            entity: *entity,
            distance: cosine_distance(query, v),
        });
    }
    top_k(hits, k)
}

fn top_k(mut hits: Vec<SearchHit>, k: usize) -> Result<Vec<SearchHit>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, SearchHit::order);
        hits.truncate(k);
    }
    hits.sort_by(SearchHit::order);
    Ok(hits)
}

/// Brute-force index over a flat vector matrix.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    dim: usize,
    refs: Vec<EntityRef>,
    data: Vec<f32>,
}

impl ExactIndex {
    pub fn build(items: &[(EntityRef, &[f32])]) -> Result<Self> {
        let Some((_, first)) = items.first() else {
            return Err(Error::EmptyIndex);
        };
        let dim = first.len();
        let mut data = Vec::with_capacity(items.len() * dim);
        for (_, v) in items {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            dim,
            refs: items.iter().map(|(e, _)| *e).collect(),
            data,
        })
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let hits = self
            .data
            .chunks_exact(self.dim)
            .zip(&self.refs)
            .map(|(v, &entity)| SearchHit {
                entity,
                distance: cosine_distance(query, v),
            })
            .collect();
        top_k(hits, k)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum AnnIndex {
    Exact(ExactIndex),
    Hnsw(HnswIndex),
}

impl AnnIndex {
    /// Exact below `params.exact_threshold` items, HNSW otherwise.
    pub fn build_auto(items: &[(EntityRef, &[f32])], params: &HnswParams) -> Result<Self> {
        if items.len() < params.exact_threshold {
            ExactIndex::build(items).map(AnnIndex::Exact)
        } else {
            HnswIndex::build(items, params).map(AnnIndex::Hnsw)
        }
    }

    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Result<Vec<SearchHit>> {
        match self {
            AnnIndex::Exact(index) => index.search(query, k),
            AnnIndex::Hnsw(index) => index.search(query, k, ef),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnnIndex::Exact(index) => index.len(),
            AnnIndex::Hnsw(index) => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Always builds an HNSW graph, regardless of size.
pub fn build_index(items: &[(EntityRef, &[f32])], params: &HnswParams) -> Result<HnswIndex> {
    HnswIndex::build(items, params)
}

pub fn search(index: &HnswIndex, query: &[f32], k: usize, ef: usize) -> Result<Vec<SearchHit>> {
    if ef < k {
        return Err(Error::InvalidArgument(format!("ef ({ef}) must be >= k ({k})")));
    }
    index.search(query, k, ef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        crate::embed::EmbeddingVector::normalized(v).unwrap().into_inner()
    }

    fn dataset(n: usize, dim: usize, seed: u64) -> Vec<(EntityRef, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| (EntityRef::new(0, i as u32), random_unit(&mut rng, dim)))
            .collect()
    }

    fn borrow(items: &[(EntityRef, Vec<f32>)]) -> Vec<(EntityRef, &[f32])> {
        items.iter().map(|(e, v)| (*e, v.as_slice())).collect()
    }

    #[test]
    fn singleton_index() {
        let items = dataset(1, 16, 1);
        let index = build_index(&borrow(&items), &HnswParams::default()).unwrap();
        let probe = dataset(5, 16, 2);
        for (_, q) in &probe {
            let hits = search(&index, q, 1, 8).unwrap();
            assert_eq!(hits[0].entity, EntityRef::new(0, 0));
        }
    }

    #[test]
    fn self_match_first() {
        let items = dataset(300, 16, 3);
        let index = build_index(&borrow(&items), &HnswParams::default()).unwrap();
        for (e, v) in items.iter().take(50) {
            let hits = search(&index, v, 3, 64).unwrap();
            assert_eq!(hits[0].entity, *e);
            assert!(hits[0].distance.abs() < 1e-6);
            assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }

    #[test]
    fn saturation_returns_everything() {
        let items = dataset(7, 8, 4);
        let index = build_index(&borrow(&items), &HnswParams::default()).unwrap();
        let hits = search(&index, &items[0].1, 20, 20).unwrap();
        assert_eq!(hits.len(), 7);
    }

    #[test]
    fn exhaustive_ef_equals_exact() {
        let items = dataset(50, 12, 5);
        let view = borrow(&items);
        let index = build_index(&view, &HnswParams::default()).unwrap();
        let probes = dataset(30, 12, 6);
        for (_, q) in &probes {
            let approx = search(&index, q, 5, 50).unwrap();
            let exact = exact_search(&view, q, 5).unwrap();
            assert_eq!(approx, exact);
        }
    }

    #[test]
    fn top5_agrees_with_exact() {
        let items = dataset(200, 16, 7);
        let view = borrow(&items);
        let index = build_index(&view, &HnswParams::default()).unwrap();
        let probes = dataset(100, 16, 8);
        let agree = probes
            .iter()
            .filter(|(_, q)| {
                let a: Vec<_> = search(&index, q, 5, 64).unwrap().iter().map(|h| h.entity).collect();
                let b: Vec<_> = exact_search(&view, q, 5).unwrap().iter().map(|h| h.entity).collect();
                a == b
            })
            .count();
        assert!(agree >= 95, "{agree}/100");
    }

    #[test]
    fn deterministic_build() {
        let items = dataset(600, 16, 9);
        let view = borrow(&items);
        let params = HnswParams {
            seed: 11,
            ..HnswParams::default()
        };
        let a = build_index(&view, &params).unwrap();
        let b = build_index(&view, &params).unwrap();
        assert_eq!(a.links, b.links);
        for (_, q) in dataset(40, 16, 10) {
            assert_eq!(search(&a, &q, 3, 16).unwrap(), search(&b, &q, 3, 16).unwrap());
        }
    }

    #[test]
    fn degree_caps_hold() {
        let items = dataset(2000, 8, 12);
        let params = HnswParams {
            m: 6,
            ef_construction: 40,
            ..HnswParams::default()
        };
        let index = build_index(&borrow(&items), &params).unwrap();
        for node in 0..index.len() {
            for layer in 0..=index.level(node) {
                let cap = if layer == 0 { 12 } else { 6 };
                assert!(index.neighbors(node, layer).unwrap().len() <= cap);
            }
        }
    }

    #[test]
    fn errors() {
        let empty: Vec<(EntityRef, &[f32])> = Vec::new();
        assert!(matches!(build_index(&empty, &HnswParams::default()), Err(Error::EmptyIndex)));
        assert!(matches!(exact_search(&empty, &[1.0], 1), Err(Error::EmptyIndex)));
        let a = [1.0f32, 0.0];
        let b = [1.0f32, 0.0, 0.0];
        let mixed = vec![(EntityRef::new(0, 0), &a[..]), (EntityRef::new(0, 1), &b[..])];
        assert!(matches!(
            build_index(&mixed, &HnswParams::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_ties_break_by_entity_ref() {
        let v = [0.6f32, 0.8];
        let items = vec![
            (EntityRef::new(1, 5), &v[..]),
            (EntityRef::new(1, 2), &v[..]),
            (EntityRef::new(0, 9), &v[..]),
        ];
        let hits = exact_search(&items, &v, 3).unwrap();
        let order: Vec<_> = hits.iter().map(|h| h.entity).collect();
        assert_eq!(order, vec![EntityRef::new(0, 9), EntityRef::new(1, 2), EntityRef::new(1, 5)]);
    }
}
