//! Mutual top-1 matching between every pair of tables, then transitive
//! merging of the matched pairs into clusters.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnIndex, HnswParams, SearchHit};
use crate::embed::Embeddings;
use crate::error::{Error, Result};
use crate::tables::{Cluster, EntityRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    /// Always the smaller of the two refs.
    pub a: EntityRef,
    pub b: EntityRef,
    pub distance: f32,
}

impl MatchPair {
    /// Canonical pair with `a < b`.
    pub fn new(x: EntityRef, y: EntityRef, distance: f32) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Self { a, b, distance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcemParams {
    /// Cosine-distance ceiling for an accepted pair.
    pub lambda: f64,
    pub ann: HnswParams,
}

impl Default for TcemParams {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            ann: HnswParams::default(),
        }
    }
}

impl TcemParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        self.ann.validate()
    }
}

/// Union-find with union by rank and path halving.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Per-table nearest-neighbor indexes, built once and shared by all table pairs.
pub struct TableIndexes {
    indexes: Vec<Option<AnnIndex>>,
    ef_search: usize,
}

impl TableIndexes {
    pub fn build(embeddings: &Embeddings, params: &HnswParams) -> Result<Self> {
        let all: Vec<u32> = (0..embeddings.n_tables() as u32).collect();
        Self::build_for(embeddings, params, &all)
    }

    /// Indexes only the listed tables.
    pub fn build_for(embeddings: &Embeddings, params: &HnswParams, tables: &[u32]) -> Result<Self> {
        params.validate()?;
        let built = tables
            .par_iter()
            .map(|&t| AnnIndex::build_auto(&table_items(embeddings, t), params).map(|i| (t, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut indexes: Vec<Option<AnnIndex>> = (0..embeddings.n_tables()).map(|_| None).collect();
        for (t, index) in built {
            indexes[t as usize] = Some(index);
        }
        Ok(Self {
            indexes,
            ef_search: params.ef_search,
        })
    }

    pub fn get(&self, table_id: u32) -> Result<&AnnIndex> {
        self.indexes
            .get(table_id as usize)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownTable(table_id))
    }
}

fn table_items(embeddings: &Embeddings, table_id: u32) -> Vec<(EntityRef, &[f32])> {
    embeddings
        .table(table_id)
        .unwrap_or_default()
        .chunks_exact(embeddings.dim())
        .enumerate()
        .map(|(r, v)| (EntityRef::new(table_id, r as u32), v))
        .collect()
}

fn top1_all(embeddings: &Embeddings, from: u32, to: &AnnIndex, ef: usize) -> Result<Vec<SearchHit>> {
    embeddings
        .table(from)
        .unwrap_or_default()
        .par_chunks_exact(embeddings.dim())
        .map(|q| {
            to.search(q, 1, ef)?
                .into_iter()
                .next()
                .ok_or(Error::EmptyIndex)
        })
        .collect()
}

/// Mutual top-1 pairs between two tables with no distance ceiling.
fn mutual_candidates(embeddings: &Embeddings, indexes: &TableIndexes, ta: u32, tb: u32) -> Result<Vec<MatchPair>> {
    if ta == tb {
        return Err(Error::InvalidArgument(format!("table pair ({ta},{tb}) must be distinct")));
    }
    let a_to_b = top1_all(embeddings, ta, indexes.get(tb)?, indexes.ef_search)?;
    let b_to_a = top1_all(embeddings, tb, indexes.get(ta)?, indexes.ef_search)?;
    let mut pairs = Vec::new();
    for (row, hit) in a_to_b.iter().enumerate() {
        let back = &b_to_a[hit.entity.row_index as usize];
        if back.entity.row_index as usize == row {
            pairs.push(MatchPair::new(EntityRef::new(ta, row as u32), hit.entity, hit.distance));
        }
    }
    Ok(pairs)
}

/// Pairs `(a, b)` from two tables where each is the other's nearest neighbor
/// and their distance is at most `lambda`.
pub fn mutual_top1_pairs(embeddings: &Embeddings, table_a: u32, table_b: u32, params: &TcemParams) -> Result<Vec<MatchPair>> {
    params.validate()?;
    for t in [table_a, table_b] {
        if embeddings.table_len(t) == 0 {
            return Err(Error::UnknownTable(t));
        }
    }
    let indexes = TableIndexes::build_for(embeddings, &params.ann, &[table_a, table_b])?;
    let mut pairs = mutual_candidates(embeddings, &indexes, table_a, table_b)?;
    pairs.retain(|p| f64::from(p.distance) <= params.lambda);
    Ok(pairs)
}

/// Every mutual top-1 pair over all `n(n-1)/2` table pairs, before any
/// distance ceiling. Filtering by `lambda` afterwards yields exactly the pairs
/// a direct run at that `lambda` would produce.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCandidates {
    pairs: Vec<MatchPair>,
}

impl PairCandidates {
    pub fn compute(embeddings: &Embeddings, params: &HnswParams) -> Result<Self> {
        let n = embeddings.n_tables() as u32;
        if n < 2 {
            return Err(Error::NeedTwoTables { found: n as usize });
        }
        for t in 0..n {
            if embeddings.table_len(t) == 0 {
                return Err(Error::InvalidArgument(format!("table {t} has no records")));
            }
        }
        let indexes = TableIndexes::build(embeddings, params)?;
        let mut pairs = Vec::new();
        for ta in 0..n {
            for tb in ta + 1..n {
                pairs.extend(mutual_candidates(embeddings, &indexes, ta, tb)?);
            }
        }
        pairs.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)));
        Ok(Self { pairs })
    }

    /// Wraps previously computed candidates, e.g. from a cache.
    pub fn from_pairs(mut pairs: Vec<MatchPair>) -> Self {
        pairs.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)));
        Self { pairs }
    }

    pub fn all(&self) -> &[MatchPair] {
        &self.pairs
    }

    pub fn within(&self, lambda: f64) -> Vec<MatchPair> {
        self.pairs
            .iter()
            .filter(|p| f64::from(p.distance) <= lambda)
            .copied()
            .collect()
    }
}

/// Connected components of the pair graph with at least two members, sorted.
pub fn transitive_merge(pairs: &[MatchPair]) -> Vec<Cluster> {
    let mut ids: HashMap<EntityRef, usize> = HashMap::new();
    let mut refs: Vec<EntityRef> = Vec::new();
    let mut id_of = |e: EntityRef, refs: &mut Vec<EntityRef>| {
        *ids.entry(e).or_insert_with(|| {
            refs.push(e);
            refs.len() - 1
        })
    };
    let edges: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (id_of(p.a, &mut refs), id_of(p.b, &mut refs)))
        .collect();
    let mut dsu = DisjointSet::new(refs.len());
    for (a, b) in edges {
        dsu.union(a, b);
    }
    let mut groups: HashMap<usize, Vec<EntityRef>> = HashMap::new();
    for (i, &e) in refs.iter().enumerate() {
        groups.entry(dsu.find(i)).or_default().push(e);
    }
    let mut clusters: Vec<Cluster> = groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(Cluster::new)
        .collect();
    clusters.sort();
    clusters
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcemOutput {
    pub pairs: Vec<MatchPair>,
    pub clusters: Vec<Cluster>,
}

/// Mutual top-1 matching over all table pairs followed by transitive merging.
pub fn run_tcem(embeddings: &Embeddings, params: &TcemParams) -> Result<TcemOutput> {
    params.validate()?;
    let candidates = PairCandidates::compute(embeddings, &params.ann)?;
    Ok(tcem_from_candidates(&candidates, params.lambda))
}

pub fn tcem_from_candidates(candidates: &PairCandidates, lambda: f64) -> TcemOutput {
    let pairs = candidates.within(lambda);
    let clusters = transitive_merge(&pairs);
    TcemOutput { pairs, clusters }
}

pub fn write_pairs(path: &Path, pairs: &[MatchPair]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut out = String::from("a_table,a_row,b_table,b_row,distance\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.a.table_id, p.a.row_index, p.b.table_id, p.b.row_index, p.distance
        ));
    }
    std::fs::write(path, out).map_err(io)
}

pub fn read_pairs(path: &Path) -> Result<Vec<MatchPair>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut pairs = Vec::new();
    for record in reader.deserialize::<(u32, u32, u32, u32, f32)>() {
        let (at, ar, bt, br, d) = record.map_err(|e| Error::Csv {
            file: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        pairs.push(MatchPair::new(EntityRef::new(at, ar), EntityRef::new(bt, br), d));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;

    fn unit(v: &[f32]) -> Vec<f32> {
        EmbeddingVector::normalized(v.to_vec()).unwrap().into_inner()
    }

    fn store(tables: &[Vec<Vec<f32>>]) -> Embeddings {
        let dim = tables[0][0].len();
        Embeddings::new(
            dim,
            tables
                .iter()
                .map(|rows| rows.iter().flat_map(|v| unit(v)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn e(t: u32, r: u32) -> EntityRef {
        EntityRef::new(t, r)
    }

    #[test]
    fn identical_singletons_pair_at_zero() {
        let emb = store(&[vec![vec![1.0, 2.0, 3.0]], vec![vec![1.0, 2.0, 3.0]]]);
        let pairs = mutual_top1_pairs(&emb, 0, 1, &TcemParams::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a, pairs[0].b), (e(0, 0), e(1, 0)));
        assert!(pairs[0].distance.abs() < 1e-6);
    }

    #[test]
    fn one_sided_top1_excluded() {
        // a's nearest in B is b, but b's nearest in A is c
        let emb = store(&[
            vec![vec![1.0, 0.3], vec![0.0, 1.0]],
            vec![vec![0.2, 1.0]],
        ]);
        let params = TcemParams {
            lambda: 2.0,
            ..TcemParams::default()
        };
        let pairs = mutual_top1_pairs(&emb, 0, 1, &params).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].a, e(0, 1));
    }

    #[test]
    fn unknown_table() {
        let emb = store(&[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        assert!(matches!(
            mutual_top1_pairs(&emb, 0, 5, &TcemParams::default()),
            Err(Error::UnknownTable(5))
        ));
    }

    #[test]
    fn chain_merges() {
        let pairs = [
            MatchPair::new(e(0, 0), e(1, 0), 0.1),
            MatchPair::new(e(1, 0), e(2, 0), 0.1),
        ];
        assert_eq!(transitive_merge(&pairs), vec![Cluster::new([e(0, 0), e(1, 0), e(2, 0)])]);
        assert!(transitive_merge(&[]).is_empty());
    }

    #[test]
    fn transitivity_across_tables() {
        // a-b and b-c close, a-c beyond lambda
        let a = [1.0, 0.0];
        let b = [(0.25f32).cos(), (0.25f32).sin()];
        let c = [(0.5f32).cos(), (0.5f32).sin()];
        let emb = store(&[vec![a.to_vec()], vec![b.to_vec()], vec![c.to_vec()]]);
        let params = TcemParams {
            lambda: 0.05,
            ..TcemParams::default()
        };
        let out = run_tcem(&emb, &params).unwrap();
        assert!(f64::from(crate::embed::cosine_distance(emb.vector(e(0, 0)), emb.vector(e(2, 0)))) > 0.05);
        assert_eq!(out.clusters, vec![Cluster::new([e(0, 0), e(1, 0), e(2, 0)])]);
    }

    #[test]
    fn dsu_basics() {
        let mut d = DisjointSet::new(5);
        assert!(d.union(0, 1));
        assert!(d.union(3, 4));
        assert!(!d.union(1, 0));
        assert_eq!(d.find(0), d.find(1));
        assert_ne!(d.find(1), d.find(3));
        let r = d.find(4);
        assert_eq!(d.find(r), r);
    }

    #[test]
    fn pairs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let pairs = vec![MatchPair::new(e(1, 3), e(0, 2), 0.125)];
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }
}
