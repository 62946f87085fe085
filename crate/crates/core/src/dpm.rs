//! Density-aware pruning of merged clusters.
//!
//! Inside each cluster, an entity's neighborhood is every member (itself
//! included) within cosine distance `d`. Members with at least `rho_min`
//! neighbors are core; a non-core member with a core in its neighborhood is
//! reachable; everything else is noise and gets removed. Neighborhoods never
//! cross cluster boundaries.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine_distance, Embeddings};
use crate::error::{Error, Result};
use crate::tables::{Cluster, EntityRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpmParams {
    /// Neighborhood radius in cosine distance.
    pub d: f64,
    pub rho_min: usize,
}

impl Default for DpmParams {
    fn default() -> Self {
        Self { d: 0.4, rho_min: 2 }
    }
}

impl DpmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0) || self.d.is_nan() {
            return Err(Error::Config("d must be >= 0".into()));
        }
        if self.rho_min < 1 {
            return Err(Error::Config("rho_min must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Core,
    Reachable,
    Noise,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Core => "core",
            Label::Reachable => "reachable",
            Label::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLabel {
    pub entity: EntityRef,
    pub label: Label,
    /// Neighborhood size, self included.
    pub neighbor_count: usize,
}

#[inline]
fn within(embeddings: &Embeddings, a: EntityRef, b: EntityRef, d: f64) -> bool {
    f64::from(cosine_distance(embeddings.vector(a), embeddings.vector(b))) <= d
}

/// Members of `cluster` within distance `d` of `entity`, including itself.
pub fn neighborhood(cluster: &Cluster, entity: EntityRef, embeddings: &Embeddings, d: f64) -> Result<Vec<EntityRef>> {
    if !cluster.contains(&entity) {
        return Err(Error::NotInCluster { entity });
    }
    Ok(cluster
        .members()
        .iter()
        .copied()
        .filter(|&other| other == entity || within(embeddings, entity, other, d))
        .collect())
}

/// Labels every member of `cluster`, in member order.
pub fn classify(cluster: &Cluster, embeddings: &Embeddings, params: &DpmParams) -> Vec<EntityLabel> {
    let members = cluster.members();
    let n = members.len();
    let close = |i: usize, j: usize| i == j || within(embeddings, members[i], members[j], params.d);
    let counts: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count()).collect();
    let core: Vec<bool> = counts.iter().map(|&c| c >= params.rho_min).collect();
    (0..n)
        .map(|i| {
            let label = if core[i] {
                Label::Core
            } else if counts[i] < params.rho_min && (0..n).any(|j| core[j] && close(i, j)) {
                Label::Reachable
            } else {
                Label::Noise
            };
            EntityLabel {
                entity: members[i],
                label,
                neighbor_count: counts[i],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutput {
    /// Surviving clusters with at least two members, sorted.
    pub clusters: Vec<Cluster>,
    /// `labels[i]` belongs to input cluster `i`.
    pub labels: Vec<Vec<EntityLabel>>,
}

impl PruneOutput {
    pub fn histogram(&self) -> LabelHistogram {
        let mut h = LabelHistogram::default();
        for l in self.labels.iter().flatten() {
            match l.label {
                Label::Core => h.core += 1,
                Label::Reachable => h.reachable += 1,
                Label::Noise => h.noise += 1,
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub core: usize,
    pub reachable: usize,
    pub noise: usize,
}

/// Removes noise members; clusters left with fewer than two members are dropped.
pub fn prune(clusters: &[Cluster], embeddings: &Embeddings, params: &DpmParams) -> PruneOutput {
    let labels: Vec<Vec<EntityLabel>> = clusters
        .par_iter()
        .map(|c| classify(c, embeddings, params))
        .collect();
    let mut kept: Vec<Cluster> = labels
        .iter()
        .filter_map(|ls| {
            let survivors: Vec<EntityRef> = ls
                .iter()
                .filter(|l| l.label != Label::Noise)
                .map(|l| l.entity)
                .collect();
            (survivors.len() >= 2).then(|| Cluster::new(survivors))
        })
        .collect();
    kept.sort();
    PruneOutput {
        clusters: kept,
        labels,
    }
}

/// `table_id,row_index,cluster_id,label,neighbor_count`; cluster ids index the input clusters.
pub fn write_labels(path: &Path, labels: &[Vec<EntityLabel>]) -> Result<()> {
    let mut out = String::from("table_id,row_index,cluster_id,label,neighbor_count\n");
    for (cluster_id, ls) in labels.iter().enumerate() {
        for l in ls {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.entity.table_id, l.entity.row_index, cluster_id, l.label, l.neighbor_count
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
