//! Attribute coordination: rewrite every record into a normalized string
//! before embedding, either with the rule engine, a text model, or a text model
//! backed by the rule engine.

pub mod gateway;
pub mod prompt;
pub mod rules;

use serde::{Deserialize, Serialize};

pub use gateway::{HttpTextModel, TextModel, TextModelConfig};
pub use prompt::{build_prompt, PromptStyle, PromptTemplate};
pub use rules::{apply_rules, builtin_rule, builtin_rules, NormalizationRule, RuleCategory};

use crate::error::{Error, RecordFailure, Result};
use crate::tables::{sample_records, Dataset, EntityRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinationMode {
    #[default]
    RulesOnly,
    ModelOnly,
    ModelWithRuleFallback,
}

impl std::str::FromStr for CoordinationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "rules_only" => Ok(Self::RulesOnly),
            "model_only" => Ok(Self::ModelOnly),
            "model_with_rule_fallback" => Ok(Self::ModelWithRuleFallback),
            other => Err(Error::InvalidArgument(format!("unknown coordination mode {other:?}"))),
        }
    }
}

impl CoordinationMode {
    pub fn uses_model(self) -> bool {
        !matches!(self, Self::RulesOnly)
    }
}

#[derive(Debug, Clone)]
pub struct CoordinationOptions {
    pub mode: CoordinationMode,
    pub template: PromptTemplate,
    pub rules: Vec<NormalizationRule>,
    /// Records drawn for the prompt's sample block.
    pub sample_size: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for CoordinationOptions {
    fn default() -> Self {
        Self {
            mode: CoordinationMode::RulesOnly,
            template: PromptTemplate::default(),
            rules: builtin_rules(),
            sample_size: 8,
            seed: 0,
            batch_size: 16,
            max_in_flight: 4,
        }
    }
}

/// A dataset whose records each carry their normalized text.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatedDataset {
    pub dataset: Dataset,
    /// `texts[table_id][row_index]`
    pub texts: Vec<Vec<String>>,
    /// Records normalized by the rule engine after a model failure.
    pub fallback_count: usize,
}

impl CoordinatedDataset {
    pub fn text(&self, entity: EntityRef) -> Option<&str> {
        self.texts
            .get(entity.table_id as usize)?
            .get(entity.row_index as usize)
            .map(String::as_str)
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityRef, &str)> + '_ {
        self.texts.iter().enumerate().flat_map(|(t, rows)| {
            rows.iter()
                .enumerate()
                .map(move |(r, s)| (EntityRef::new(t as u32, r as u32), s.as_str()))
        })
    }

    pub fn total_records(&self) -> usize {
        self.texts.iter().map(Vec::len).sum()
    }
}

fn serialized(dataset: &Dataset) -> Result<Vec<Vec<String>>> {
    dataset
        .tables
        .iter()
        .map(|t| {
            (0..t.len())
                .map(|row| crate::tables::serialize_record(t, row))
                .collect()
        })
        .collect()
}

/// Serialized records without any normalization (coordination bypassed).
pub fn passthrough(dataset: &Dataset) -> Result<CoordinatedDataset> {
    Ok(CoordinatedDataset {
        dataset: dataset.clone(),
        texts: serialized(dataset)?,
        fallback_count: 0,
    })
}

/// Normalizes every record of `dataset`. Model modes need `model`.
pub fn coordinate(
    dataset: &Dataset,
    options: &CoordinationOptions,
    model: Option<&dyn TextModel>,
) -> Result<CoordinatedDataset> {
    let raw = serialized(dataset)?;
    if options.mode == CoordinationMode::RulesOnly {
        let texts = raw
            .iter()
            .map(|rows| rows.iter().map(|s| apply_rules(s, &options.rules)).collect())
            .collect();
        return Ok(CoordinatedDataset {
            dataset: dataset.clone(),
            texts,
            fallback_count: 0,
        });
    }

    let model = model.ok_or_else(|| {
        Error::Config(format!("coordination mode {:?} needs a text model", options.mode))
    })?;
    if options.batch_size == 0 || options.max_in_flight == 0 {
        return Err(Error::Config("batch_size and max_in_flight must be positive".into()));
    }

    let k = options.sample_size.clamp(1, dataset.total_records());
    let samples = sample_records(dataset, k, options.seed)?
        .into_iter()
        .map(|e| raw[e.table_id as usize][e.row_index as usize].clone())
        .collect::<Vec<_>>();
    let system = build_prompt(&options.template, &options.rules, &samples)?;

    let entities: Vec<EntityRef> = dataset.entity_refs().collect();
    let batches: Vec<&[EntityRef]> = entities.chunks(options.batch_size).collect();
    let results = run_batches(&batches, options.max_in_flight, |batch| {
        let lines: Vec<&str> = batch
            .iter()
            .map(|e| raw[e.table_id as usize][e.row_index as usize].as_str())
            .collect();
        let user = options.template.render_records(&lines)?;
        let reply = model.complete(&system, &user, lines.len())?;
        let out = gateway::response_lines(&reply);
        if out.len() != lines.len() {
            return Err(Error::Gateway {
                attempts: 1,
                message: format!("expected {} lines, got {}", lines.len(), out.len()),
            });
        }
        Ok(out)
    });

    let mut texts = raw.clone();
    let mut failures = Vec::new();
    let mut fallback_count = 0;
    for (batch, result) in batches.iter().zip(results) {
        match result {
            Ok(lines) => {
                for (e, line) in batch.iter().zip(lines) {
                    texts[e.table_id as usize][e.row_index as usize] = line.trim().to_string();
                }
            }
            Err(err) if options.mode == CoordinationMode::ModelWithRuleFallback => {
                log::warn!("batch of {} fell back to rules: {err}", batch.len());
                for e in batch.iter() {
                    let slot = &mut texts[e.table_id as usize][e.row_index as usize];
                    *slot = apply_rules(slot, &options.rules);
                }
                fallback_count += batch.len();
            }
            Err(err) => {
                let reason = err.to_string();
                failures.extend(batch.iter().map(|&entity| RecordFailure {
                    entity,
                    reason: reason.clone(),
                }));
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Coordination { failures });
    }
    Ok(CoordinatedDataset {
        dataset: dataset.clone(),
        texts,
        fallback_count,
    })
}

/// Runs `work` over every batch with at most `in_flight` concurrent calls,
/// returning results in batch order.
fn run_batches<'a, T, F>(batches: &[&'a [EntityRef]], in_flight: usize, work: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&'a [EntityRef]) -> Result<T> + Sync,
{
    let mut results = Vec::with_capacity(batches.len());
    for wave in batches.chunks(in_flight) {
        if wave.len() == 1 {
            results.push(work(wave[0]));
            continue;
        }
        let wave_results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&batch| scope.spawn(|| work(batch)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("coordination worker panicked"))
                .collect()
        });
        results.extend(wave_results);
    }
    results
}
