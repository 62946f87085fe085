//! End-to-end orchestration: coordinate → embed → match → merge → prune → score,
//! with content-addressed stage caches and on-disk artifacts.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordination::{
    self, builtin_rules, CoordinatedDataset, CoordinationMode, CoordinationOptions, HttpTextModel,
    NormalizationRule, PromptStyle, PromptTemplate, TextModel, TextModelConfig,
};
use crate::dpm::{self, DpmParams, LabelHistogram, PruneOutput};
use crate::embed::{embed_dataset, EmbedderConfig, Embeddings};
use crate::error::{Error, Result};
use crate::eval::{score, EvalReport};
use crate::tables::{self, Cluster, Dataset, IngestConfig};
use crate::tcem::{self, MatchPair, PairCandidates, TcemOutput, TcemParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomRuleConfig {
    pub id: String,
    pub instruction: String,
    pub pattern: String,
    pub replacement: String,
    #[serde(default)]
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinationConfig {
    pub mode: CoordinationMode,
    pub style: PromptStyle,
    pub sample_size: usize,
    pub custom_rules: Vec<CustomRuleConfig>,
    pub text_model: TextModelConfig,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        Self {
            mode: CoordinationMode::RulesOnly,
            style: PromptStyle::Simple,
            sample_size: 8,
            custom_rules: Vec::new(),
            text_model: TextModelConfig::default(),
        }
    }
}

impl CoordinationConfig {
    pub fn rules(&self) -> Result<Vec<NormalizationRule>> {
        let mut rules = builtin_rules();
        for c in &self.custom_rules {
            rules.push(
                NormalizationRule::custom(&c.id, &c.instruction, &c.pattern, &c.replacement, c.columns.clone())
                    .map_err(|e| Error::Config(format!("custom rule {}: {e}", c.id)))?,
            );
        }
        Ok(rules)
    }

    fn options(&self, seed: u64) -> Result<CoordinationOptions> {
        Ok(CoordinationOptions {
            mode: self.mode,
            template: PromptTemplate::for_style(self.style),
            rules: self.rules()?,
            sample_size: self.sample_size,
            seed,
            batch_size: self.text_model.batch_size,
            max_in_flight: self.text_model.max_in_flight,
        })
    }
}

/// Stage bypasses for ablation runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalToggles {
    /// Embed raw serialized records instead of coordinated ones.
    pub disable_mplac: bool,
    /// Report merged clusters without pruning.
    pub disable_dpm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Master seed: HNSW levels and prompt sampling.
    pub seed: u64,
    pub ingest: IngestConfig,
    pub coordination: CoordinationConfig,
    pub embedder: EmbedderConfig,
    pub tcem: TcemParams,
    pub dpm: DpmParams,
    pub eval: EvalToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            ingest: IngestConfig::default(),
            coordination: CoordinationConfig::default(),
            embedder: EmbedderConfig::default(),
            tcem: TcemParams::default(),
            dpm: DpmParams::default(),
            eval: EvalToggles::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        self.tcem.validate()?;
        self.dpm.validate()?;
        if self.coordination.mode.uses_model() {
            self.coordination.text_model.validate()?;
        }
        self.coordination.rules()?;
        Ok(())
    }

    fn tcem_params(&self) -> TcemParams {
        let mut p = self.tcem.clone();
        p.ann.seed = self.seed;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Debug, Default, Clone)]
struct Timer {
    stages: Vec<StageTiming>,
}

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<(T, bool)>) -> Result<T> {
        let start = Instant::now();
        let (value, cached) = f()?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("stage {stage}: {seconds:.3}s{}", if cached { " (cached)" } else { "" });
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds,
            cached,
        });
        Ok(value)
    }
}

/// Content-addressed stage cache in a directory.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: PathBuf,
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for t in &dataset.tables {
        h.update(t.name.as_bytes());
        h.update([0]);
        for c in &t.columns {
            h.update(c.as_bytes());
            h.update([0x1f]);
        }
        for r in &t.rows {
            for v in &r.values {
                h.update((v.len() as u64).to_le_bytes());
                h.update(v.as_bytes());
            }
        }
        h.update([0x1e]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn texts_digest(texts: &[Vec<String>]) -> String {
    let mut h = Sha256::new();
    for rows in texts {
        h.update((rows.len() as u64).to_le_bytes());
        for s in rows {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl StageCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn get_texts(&self, key: &str) -> Option<Vec<Vec<String>>> {
        let bytes = std::fs::read(self.path(key, "texts.json")).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn put_texts(&self, key: &str, texts: &[Vec<String>]) -> Result<()> {
        self.write_atomic(&self.path(key, "texts.json"), &serde_json::to_vec(texts)?)
    }

    fn get_embeddings(&self, key: &str) -> Option<Embeddings> {
        let bytes = std::fs::read(self.path(key, "emb")).ok()?;
        decode_embeddings(&bytes)
    }

    fn put_embeddings(&self, key: &str, embeddings: &Embeddings) -> Result<()> {
        self.write_atomic(&self.path(key, "emb"), &encode_embeddings(embeddings))
    }

    fn get_pairs(&self, key: &str) -> Option<Vec<MatchPair>> {
        let path = self.path(key, "pairs.csv");
        path.is_file().then(|| tcem::read_pairs(&path).ok()).flatten()
    }

    fn put_pairs(&self, key: &str, pairs: &[MatchPair]) -> Result<()> {
        let path = self.path(key, "pairs.csv");
        let tmp = path.with_extension("tmp");
        tcem::write_pairs(&tmp, pairs)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// `dim u32 | tables u32 | per table: rows u32 | rows×dim f32`, little-endian.
fn encode_embeddings(e: &Embeddings) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + e.len() * e.dim() * 4);
    out.extend((e.dim() as u32).to_le_bytes());
    out.extend((e.n_tables() as u32).to_le_bytes());
    for t in e.raw_tables() {
        out.extend(((t.len() / e.dim()) as u32).to_le_bytes());
        for x in t {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

fn decode_embeddings(bytes: &[u8]) -> Option<Embeddings> {
    let mut pos = 0usize;
    let u32_at = |pos: &mut usize| -> Option<u32> {
        let v = u32::from_le_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?);
        *pos += 4;
        Some(v)
    };
    let dim = u32_at(&mut pos)? as usize;
    let n = u32_at(&mut pos)? as usize;
    let mut tables = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = u32_at(&mut pos)? as usize;
        let len = rows * dim * 4;
        let chunk = bytes.get(pos..pos + len)?;
        pos += len;
        tables.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    (pos == bytes.len()).then(|| Embeddings::new(dim, tables).ok()).flatten()
}

/// Everything upstream of the distance thresholds; reusable across sweeps.
#[derive(Debug)]
pub struct Prepared {
    pub coordinated: CoordinatedDataset,
    pub embeddings: Embeddings,
    pub candidates: PairCandidates,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug)]
pub struct MatchResult {
    pub tcem: TcemOutput,
    pub pruned: Option<PruneOutput>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub prepared: Prepared,
    pub result: MatchResult,
    pub report: Option<EvalReport>,
    pub timings: Vec<StageTiming>,
}

impl PipelineRun {
    pub fn label_histogram(&self) -> Option<LabelHistogram> {
        self.result.pruned.as_ref().map(PruneOutput::histogram)
    }
}

/// Runs coordination, embedding and mutual top-1 candidate search.
pub fn prepare(dataset: &Dataset, config: &PipelineConfig, model: Option<&dyn TextModel>) -> Result<Prepared> {
    let mut timer = Timer::default();
    prepare_timed(dataset, config, model, &mut timer, None)
}

fn prepare_timed(
    dataset: &Dataset,
    config: &PipelineConfig,
    model: Option<&dyn TextModel>,
    timer: &mut Timer,
    sink: Option<&Path>,
) -> Result<Prepared> {
    config.validate()?;
    let cache = config
        .paths
        .cache_dir
        .as_deref()
        .map(StageCache::open)
        .transpose()?;

    let coordinated = timer.time("coordinate", || {
        let (key, options) = if config.eval.disable_mplac {
            (hex_digest(&[dataset_digest(dataset).as_bytes(), b"passthrough"]), None)
        } else {
            let options = config.coordination.options(config.seed)?;
            let tm = if config.coordination.mode.uses_model() {
                serde_json::to_vec(&config.coordination.text_model)?
            } else {
                Vec::new()
            };
            let rules: Vec<String> = options.rules.iter().map(|r| format!("{}:{}", r.rule_id, r.instruction)).collect();
            let custom = serde_json::to_vec(&config.coordination.custom_rules)?;
            let key = hex_digest(&[
                dataset_digest(dataset).as_bytes(),
                serde_json::to_vec(&(config.coordination.mode, config.coordination.style, config.coordination.sample_size, config.seed))?.as_slice(),
                serde_json::to_vec(&options.template)?.as_slice(),
                rules.join("\n").as_bytes(),
                &custom,
                &tm,
            ]);
            (key, Some(options))
        };
        if let Some(texts) = cache.as_ref().and_then(|c| c.get_texts(&key)) {
            if texts.len() == dataset.n_tables()
                && texts.iter().zip(&dataset.tables).all(|(t, s)| t.len() == s.len())
            {
                return Ok((
                    CoordinatedDataset {
                        dataset: dataset.clone(),
                        texts,
                        fallback_count: 0,
                    },
                    true,
                ));
            }
        }
        let coordinated = match options {
            None => coordination::passthrough(dataset)?,
            Some(options) => {
                let owned;
                let model = match model {
                    Some(m) => Some(m),
                    None if options.mode.uses_model() => {
                        owned = HttpTextModel::new(config.coordination.text_model.clone())?;
                        Some(&owned as &dyn TextModel)
                    }
                    None => None,
                };
                coordination::coordinate(dataset, &options, model)?
            }
        };
        if let Some(c) = &cache {
            c.put_texts(&key, &coordinated.texts)?;
        }
        Ok((coordinated, false))
    })?;
    if let Some(dir) = sink {
        write_coordinated(&dir.join(artifacts::COORDINATED), &coordinated)?;
    }

    let embed_key = hex_digest(&[
        texts_digest(&coordinated.texts).as_bytes(),
        &serde_json::to_vec(&config.embedder)?,
    ]);
    let embeddings = timer.time("embed", || {
        if let Some(e) = cache.as_ref().and_then(|c| c.get_embeddings(&embed_key)) {
            return Ok((e, true));
        }
        let e = embed_dataset(&coordinated, &config.embedder)?;
        if let Some(c) = &cache {
            c.put_embeddings(&embed_key, &e)?;
        }
        Ok((e, false))
    })?;

    let tcem_params = config.tcem_params();
    let pairs_key = hex_digest(&[embed_key.as_bytes(), &serde_json::to_vec(&tcem_params.ann)?]);
    let candidates = timer.time("match", || {
        if let Some(pairs) = cache.as_ref().and_then(|c| c.get_pairs(&pairs_key)) {
            return Ok((PairCandidates::from_pairs(pairs), true));
        }
        let candidates = PairCandidates::compute(&embeddings, &tcem_params.ann)?;
        if let Some(c) = &cache {
            c.put_pairs(&pairs_key, candidates.all())?;
        }
        Ok((candidates, false))
    })?;

    Ok(Prepared {
        coordinated,
        embeddings,
        candidates,
        timings: timer.stages.clone(),
    })
}

/// Applies the distance ceiling, merges, and (unless disabled) prunes.
pub fn finish(prepared: &Prepared, lambda: f64, dpm_params: Option<&DpmParams>) -> MatchResult {
    let tcem = tcem::tcem_from_candidates(&prepared.candidates, lambda);
    finish_from_tcem(prepared, tcem, dpm_params)
}

pub(crate) fn finish_from_tcem(prepared: &Prepared, tcem: TcemOutput, dpm_params: Option<&DpmParams>) -> MatchResult {
    match dpm_params {
        None => MatchResult {
            clusters: tcem.clusters.clone(),
            tcem,
            pruned: None,
        },
        Some(p) => {
            let pruned = dpm::prune(&tcem.clusters, &prepared.embeddings, p);
            MatchResult {
                clusters: pruned.clusters.clone(),
                tcem,
                pruned: Some(pruned),
            }
        }
    }
}

pub(crate) fn report_for(dataset: &Dataset, result: &MatchResult) -> Result<Option<EvalReport>> {
    let Some(truth) = &dataset.ground_truth else {
        return Ok(None);
    };
    let mut report = score(&result.clusters, truth)?;
    report.stage_counts.insert("pairs".into(), result.tcem.pairs.len());
    report.stage_counts.insert("merged_clusters".into(), result.tcem.clusters.len());
    report.stage_counts.insert("final_clusters".into(), result.clusters.len());
    Ok(Some(report))
}

/// Runs every stage in memory. Scores when the dataset has ground truth.
pub fn run_on_dataset(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineRun> {
    run_with(dataset, config, None, None)
}

/// As [`run_on_dataset`], with an explicit text model for model coordination modes.
pub fn run_with_model(dataset: &Dataset, config: &PipelineConfig, model: &dyn TextModel) -> Result<PipelineRun> {
    run_with(dataset, config, Some(model), None)
}

fn run_with(
    dataset: &Dataset,
    config: &PipelineConfig,
    model: Option<&dyn TextModel>,
    sink: Option<&Path>,
) -> Result<PipelineRun> {
    let mut timer = Timer::default();
    let prepared = prepare_timed(dataset, config, model, &mut timer, sink)?;
    let lambda = config.tcem.lambda;
    let tcem = timer.time("merge", || {
        Ok((tcem::tcem_from_candidates(&prepared.candidates, lambda), false))
    })?;
    if let Some(dir) = sink {
        tcem::write_pairs(&dir.join(artifacts::PAIRS), &tcem.pairs)?;
        tables::write_clusters(&dir.join(artifacts::MERGED), &tcem.clusters)?;
    }
    let dpm_params = (!config.eval.disable_dpm).then_some(&config.dpm);
    let result = timer.time("prune", || Ok((finish_from_tcem(&prepared, tcem, dpm_params), false)))?;
    if let Some(dir) = sink {
        tables::write_clusters(&dir.join(artifacts::FINAL), &result.clusters)?;
        if let Some(pruned) = &result.pruned {
            dpm::write_labels(&dir.join(artifacts::LABELS), &pruned.labels)?;
        }
    }
    let report = timer.time("score", || Ok((report_for(dataset, &result)?, false)))?;
    Ok(PipelineRun {
        prepared,
        result,
        report,
        timings: timer.stages,
    })
}

/// Stable artifact filenames under the output directory.
pub mod artifacts {
    pub const COORDINATED: &str = "coordinated.csv";
    pub const PAIRS: &str = "pairs.csv";
    pub const MERGED: &str = "clusters_merged.csv";
    pub const FINAL: &str = "clusters_final.csv";
    pub const LABELS: &str = "labels.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const ERROR: &str = "error.json";
}

fn write_coordinated(path: &Path, coordinated: &CoordinatedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["table_id", "row_index", "text"]).map_err(csv_err)?;
    for (e, text) in coordinated.entities() {
        w.write_record([e.table_id.to_string(), e.row_index.to_string(), text.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    report: Option<&'a EvalReport>,
    label_histogram: Option<LabelHistogram>,
    timings: &'a [StageTiming],
    fallback_records: usize,
    config: &'a PipelineConfig,
}

#[derive(Debug, Serialize)]
struct ErrorSummary {
    error: String,
    completed_stages: Vec<String>,
}

/// Loads the dataset named in `config`, runs every stage, and writes
/// artifacts under `config.paths.out_dir`. On failure `error.json` is written
/// next to whatever artifacts were already produced.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    run_pipeline_with(config, None)
}

pub fn run_pipeline_with(config: &PipelineConfig, model: Option<&dyn TextModel>) -> Result<PipelineRun> {
    let out = &config.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result = tables::load_dataset(&config.paths.dataset, &config.ingest)
        .and_then(|dataset| run_with(&dataset, config, model, Some(out)));
    match result {
        Ok(run) => {
            let summary = RunSummary {
                report: run.report.as_ref(),
                label_histogram: run.label_histogram(),
                timings: &run.timings,
                fallback_records: run.prepared.coordinated.fallback_count,
                config,
            };
            let json = serde_json::to_string_pretty(&summary)?;
            let path = out.join(artifacts::REPORT_JSON);
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            let path = out.join(artifacts::REPORT_TXT);
            let mut text = run.report.as_ref().map(EvalReport::to_table).unwrap_or_default();
            for t in &run.timings {
                text.push_str(&format!(
                    "time.{:<10} {:>10.3}s{}\n",
                    t.stage,
                    t.seconds,
                    if t.cached { " (cached)" } else { "" }
                ));
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(run)
        }
        Err(err) => {
            let completed = [
                (artifacts::COORDINATED, "coordinate"),
                (artifacts::PAIRS, "merge"),
                (artifacts::FINAL, "prune"),
            ]
            .iter()
            .filter(|(f, _)| out.join(f).is_file())
            .map(|(_, s)| s.to_string())
            .collect();
            let summary = ErrorSummary {
                error: err.to_string(),
                completed_stages: completed,
            };
            let path = out.join(artifacts::ERROR);
            if let Ok(mut f) = std::fs::File::create(&path) {
                let _ = f.write_all(serde_json::to_string_pretty(&summary).unwrap_or_default().as_bytes());
            }
            Err(err)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let config = PipelineConfig::default();
        let text = config.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), config);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let config = PipelineConfig::from_toml_str("seed = 9\n[tcem]\nlambda = 0.25\n").unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.tcem.lambda, 0.25);
        assert_eq!(config.dpm.rho_min, 2);
        assert_eq!(config.embedder.max_seq_length, 64);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_toml_str("[dpm]\nrho_min = 0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[embedder]\ndimension = 4\n").is_err());
        assert!(PipelineConfig::from_toml_str("[tcem]\nlambda = -1.0\n").is_err());
    }

    #[test]
    fn embeddings_codec() {
        let e = Embeddings::new(2, vec![vec![1.0, 0.0, 0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        assert_eq!(decode_embeddings(&encode_embeddings(&e)), Some(e));
        assert_eq!(decode_embeddings(&[1, 2, 3]), None);
    }
}
