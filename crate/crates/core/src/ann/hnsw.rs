//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Layer 0 holds every node with up to `2·M` links; upper layers hold up to
//! `M`. New nodes link to the `M` closest candidates found by a beam search of
//! width `ef_construction`; a neighbor whose list overflows keeps its closest
//! entries. Node levels are drawn as `floor(-ln(U) · mL)` from a seeded ChaCha
//! stream, so a build is fully determined by its items, order and seed.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HnswParams, SearchHit};
use crate::embed::cosine_distance;
use crate::error::{Error, Result};
use crate::tables::EntityRef;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub distance: f32,
    pub id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Epoch-stamped visited set, reused across searches.
#[derive(Default)]
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true the first time `id` is seen in this epoch.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Asks the kernel to back a large vector table with huge pages; searches
/// touch it at random and otherwise spend much of their time on TLB misses.
fn advise_huge_pages(data: &Vec<f32>) {
    #[cfg(target_os = "linux")]
    {
        const PAGE: usize = 4096;
        let start = data.as_ptr() as usize;
        let end = start + data.capacity() * std::mem::size_of::<f32>();
        let aligned = start.next_multiple_of(PAGE);
        if end > aligned + (2 << 20) {
            // SAFETY: the range lies inside a live allocation; MADV_HUGEPAGE is advisory.
            unsafe {
                libc::madvise(aligned as *mut libc::c_void, end - aligned, libc::MADV_HUGEPAGE);
            }
        }
    }
    #[cfg(not(target_os = "linux"))]
    let _ = data;
}

thread_local! {
    static VISITED: RefCell<Visited> = RefCell::new(Visited::default());
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    pub(crate) params: HnswParams,
    pub(crate) dim: usize,
    pub(crate) refs: Vec<EntityRef>,
    pub(crate) data: Vec<f32>,
    /// `links[node][layer]`; a node has `level + 1` layers.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) entry: u32,
    pub(crate) max_level: usize,
    pub(crate) build_distance_evals: u64,
}

impl HnswIndex {
    pub fn build(items: &[(EntityRef, &[f32])], params: &HnswParams) -> Result<Self> {
        params.validate()?;
        let Some((_, first)) = items.first() else {
            return Err(Error::EmptyIndex);
        };
        let dim = first.len();
        let mut data = Vec::with_capacity(items.len() * dim);
        advise_huge_pages(&data);
        for (_, v) in items {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        let mut index = Self {
            params: params.clone(),
            dim,
            refs: items.iter().map(|(e, _)| *e).collect(),
            data,
            links: Vec::with_capacity(items.len()),
            entry: 0,
            max_level: 0,
            build_distance_evals: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = params.level_multiplier();
        let mut visited = Visited::default();
        for id in 0..items.len() as u32 {
            let u: f64 = 1.0 - rng.gen::<f64>();
            let level = ((-u.ln() * level_mult).floor() as usize).min(MAX_LEVEL);
            index.insert(id, level, &mut visited);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distance evaluations spent during construction.
    pub fn build_distance_evals(&self) -> u64 {
        self.build_distance_evals
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    /// Neighbor list of `node` at `layer`, if the node reaches that layer.
    pub fn neighbors(&self, node: usize, layer: usize) -> Option<&[u32]> {
        self.links.get(node)?.get(layer).map(Vec::as_slice)
    }

    pub fn level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    #[inline]
    fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Hints the cache to start loading a vector that is about to be scored.
    #[inline]
    fn prefetch(&self, id: u32) {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
            let v = self.vector(id);
            for line in (0..v.len()).step_by(16) {
                // SAFETY: prefetch is a hint and never faults; the pointer is in bounds.
                unsafe { _mm_prefetch::<_MM_HINT_T0>(v.as_ptr().add(line).cast()) };
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        let _ = id;
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, id: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let query = self.vector(id).to_vec();
        let mut evals = 0u64;
        let d = cosine_distance(&query, self.vector(self.entry));
        evals += 1;
        let mut entry_points = vec![Candidate {
            distance: d,
            id: self.entry,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            entry_points = self.search_layer(&query, &entry_points, 1, layer, visited, &mut evals);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(
                &query,
                &entry_points,
                self.params.ef_construction,
                layer,
                visited,
                &mut evals,
            );
            let chosen: Vec<Candidate> = found.iter().take(self.cap(layer)).copied().collect();
            self.links[id as usize][layer] = chosen.iter().map(|c| c.id).collect();
            let cap = self.cap(layer);
            for c in &chosen {
                let list = &mut self.links[c.id as usize][layer];
                list.push(id);
                if list.len() > cap {
                    let owner = self.vector(c.id).to_vec();
                    let mut scored: Vec<Candidate> = self.links[c.id as usize][layer]
                        .iter()
                        .map(|&n| Candidate {
                            distance: cosine_distance(&owner, self.vector(n)),
                            id: n,
                        })
                        .collect();
                    evals += scored.len() as u64;
                    scored.sort_unstable();
                    scored.truncate(cap);
                    self.links[c.id as usize][layer] = scored.into_iter().map(|c| c.id).collect();
                }
            }
            entry_points = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = id;
        }
        self.build_distance_evals += evals;
    }

    /// Beam search restricted to one layer. Returns up to `ef` candidates, closest first.
    fn search_layer(
        &self,
        query: &[f32],
        entry_points: &[Candidate],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
        evals: &mut u64,
    ) -> Vec<Candidate> {
        visited.reset(self.refs.len());
        let mut frontier: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
        let mut best: BinaryHeap<Candidate> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep.id) {
                frontier.push(Reverse(ep));
                best.push(ep);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(current)) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|worst| current > *worst) {
                break;
            }
            let Some(neighbors) = self.links[current.id as usize].get(layer) else {
                continue;
            };
            let mut fresh = [0u32; 64];
            let mut n_fresh = 0;
            for &n in neighbors {
                if n_fresh < fresh.len() && visited.insert(n) {
                    fresh[n_fresh] = n;
                    n_fresh += 1;
                }
            }
            if n_fresh > 0 {
                self.prefetch(fresh[0]);
            }
            for (i, &n) in fresh[..n_fresh].iter().enumerate() {
                if let Some(&next) = fresh[..n_fresh].get(i + 1) {
                    self.prefetch(next);
                }
                let candidate = Candidate {
                    distance: cosine_distance(query, self.vector(n)),
                    id: n,
                };
                *evals += 1;
                if best.len() < ef || best.peek().is_some_and(|worst| candidate < *worst) {
                    frontier.push(Reverse(candidate));
                    best.push(candidate);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Approximate top-`k`; returned distances are exact for the returned items.
    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Result<Vec<SearchHit>> {
        if self.refs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let ef = ef.max(k);
        VISITED.with(|cell| {
            let mut visited = cell.borrow_mut();
            let mut evals = 0u64;
            let mut entry_points = vec![Candidate {
                distance: cosine_distance(query, self.vector(self.entry)),
                id: self.entry,
            }];
            for layer in (1..=self.max_level).rev() {
                entry_points = self.search_layer(query, &entry_points, 1, layer, &mut visited, &mut evals);
            }
            let found = self.search_layer(query, &entry_points, ef, 0, &mut visited, &mut evals);
            let mut hits: Vec<SearchHit> = found
                .into_iter()
                .map(|c| SearchHit {
                    entity: self.refs[c.id as usize],
                    distance: c.distance,
                })
                .collect();
            hits.sort_by(SearchHit::order);
            hits.truncate(k);
            Ok(hits)
        })
    }
}
