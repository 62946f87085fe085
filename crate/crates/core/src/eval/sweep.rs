//! Parameter sweeps and stage ablations over one dataset.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig};
use crate::tables::Dataset;
use crate::tcem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    D,
}

impl FromStr for SweepParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" => Ok(Self::Lambda),
            "d" => Ok(Self::D),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lambda => "lambda",
            Self::D => "d",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl SweepSpec {
    /// Inclusive grid `start, start+step, ..., <= end`.
    pub fn grid(parameter: SweepParameter, start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(end >= start) {
            return Err(Error::InvalidArgument("grid needs step > 0 and end >= start".into()));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        let values = (0..=n).map(|i| start + step * i as f64).collect();
        Ok(Self { parameter, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mplac,
    Dpm,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mplac" | "coordination" => Ok(Self::Mplac),
            "dpm" | "prune" => Ok(Self::Dpm),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

fn require_truth(dataset: &Dataset) -> Result<()> {
    if dataset.ground_truth.is_none() {
        return Err(Error::EmptyTruth);
    }
    Ok(())
}

/// Scores the pipeline at each value of one threshold. Coordination,
/// embeddings and candidate pairs are computed once and reused.
pub fn sweep(dataset: &Dataset, config: &PipelineConfig, spec: &SweepSpec) -> Result<Vec<(f64, EvalReport)>> {
    require_truth(dataset)?;
    let prepared = pipeline::prepare(dataset, config, None)?;
    let dpm_enabled = !config.eval.disable_dpm;
    let mut out = Vec::with_capacity(spec.values.len());
    match spec.parameter {
        SweepParameter::Lambda => {
            for &lambda in &spec.values {
                let result = pipeline::finish(&prepared, lambda, dpm_enabled.then_some(&config.dpm));
                out.push((lambda, pipeline::report_for(dataset, &result)?.expect("truth present")));
            }
        }
        SweepParameter::D => {
            let merged = tcem::tcem_from_candidates(&prepared.candidates, config.tcem.lambda);
            for &d in &spec.values {
                let params = crate::dpm::DpmParams { d, ..config.dpm.clone() };
                params.validate()?;
                let result = pipeline::finish_from_tcem(&prepared, merged.clone(), Some(&params));
                out.push((d, pipeline::report_for(dataset, &result)?.expect("truth present")));
            }
        }
    }
    Ok(out)
}

/// Runs the pipeline with the given stages bypassed.
pub fn ablate(dataset: &Dataset, config: &PipelineConfig, disable: &HashSet<Stage>) -> Result<EvalReport> {
    require_truth(dataset)?;
    let mut config = config.clone();
    config.eval.disable_mplac |= disable.contains(&Stage::Mplac);
    config.eval.disable_dpm |= disable.contains(&Stage::Dpm);
    let run = pipeline::run_on_dataset(dataset, &config)?;
    Ok(run.report.expect("truth present"))
}

/// `value,precision,recall,f1`
pub fn write_sweep_csv(path: &Path, rows: &[(f64, EvalReport)]) -> Result<()> {
    let mut out = String::from("value,precision,recall,f1\n");
    for (v, r) in rows {
        out.push_str(&format!("{v},{},{},{}\n", r.precision, r.recall, r.f1));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        let g = SweepSpec::grid(SweepParameter::Lambda, 0.1, 0.5, 0.1).unwrap();
        assert_eq!(g.values.len(), 5);
        assert!((g.values[4] - 0.5).abs() < 1e-12);
        assert!(SweepSpec::grid(SweepParameter::D, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("lambda".parse::<SweepParameter>().unwrap(), SweepParameter::Lambda);
        assert_eq!("DPM".parse::<Stage>().unwrap(), Stage::Dpm);
        assert!("x".parse::<Stage>().is_err());
    }
}
