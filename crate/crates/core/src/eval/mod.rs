//! Tuple-exact scoring: a predicted cluster counts only when its member set
//! equals a ground-truth cluster exactly.

mod sweep;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use sweep::{ablate, sweep, write_sweep_csv, Stage, SweepParameter, SweepSpec};

use crate::error::{Error, Result};
use crate::tables::{Cluster, EntityRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted_count: usize,
    pub truth_count: usize,
    pub correct_count: usize,
    /// Cluster (or pair) counts per pipeline stage.
    #[serde(default)]
    pub stage_counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn is_perfect(&self) -> bool {
        self.correct_count == self.predicted_count && self.correct_count == self.truth_count
    }

    /// Aligned two-column text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("precision".into(), format!("{:.4}", self.precision)),
            ("recall".into(), format!("{:.4}", self.recall)),
            ("f1".into(), format!("{:.4}", self.f1)),
            ("predicted".into(), self.predicted_count.to_string()),
            ("truth".into(), self.truth_count.to_string()),
            ("correct".into(), self.correct_count.to_string()),
        ];
        rows.extend(
            self.stage_counts
                .iter()
                .map(|(k, v)| (format!("stage.{k}"), v.to_string())),
        );
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn check_disjoint(clusters: &[Cluster], what: &str) -> Result<()> {
    let mut seen: HashSet<EntityRef> = HashSet::new();
    for c in clusters {
        for &m in c.members() {
            if !seen.insert(m) {
                return Err(Error::InvalidArgument(format!("{what} clusters overlap at {m}")));
            }
        }
    }
    Ok(())
}

/// Scores `predicted` against `truth`. Ground-truth clusters with a single
/// member are ignored; precision is 0 when nothing is predicted.
pub fn score(predicted: &[Cluster], truth: &[Cluster]) -> Result<EvalReport> {
    check_disjoint(predicted, "predicted")?;
    check_disjoint(truth, "ground-truth")?;
    let truth: HashSet<&[EntityRef]> = truth
        .iter()
        .filter(|c| c.len() >= 2)
        .map(Cluster::members)
        .collect();
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    let correct = predicted
        .iter()
        .filter(|p| truth.contains(p.members()))
        .count();
    let precision = if predicted.is_empty() {
        0.0
    } else {
        correct as f64 / predicted.len() as f64
    };
    let recall = correct as f64 / truth.len() as f64;
    Ok(EvalReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        predicted_count: predicted.len(),
        truth_count: truth.len(),
        correct_count: correct,
        stage_counts: BTreeMap::new(),
    })
}
