use std::path::Path;

use multimatch::pipeline::artifacts;
use multimatch::synth::{generate, Corruption, SynthSpec};
use multimatch::tables::{read_clusters, write_dataset, IngestConfig};
use multimatch::{run_on_dataset, run_pipeline, Error, PipelineConfig};

fn write_synth(dir: &Path, spec: &SynthSpec) {
    write_dataset(dir, &generate(spec).unwrap(), &IngestConfig::default()).unwrap();
}

fn noisy(seed: u64) -> SynthSpec {
    SynthSpec {
        n_entities: 120,
        corruption: Corruption {
            typo_rate: 0.1,
            unit_mangle_rate: 0.3,
            time_format_rate: 0.3,
        },
        decoy_rate: 0.2,
        seed,
        ..SynthSpec::default()
    }
}

fn config_for(root: &Path, out: &str) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.paths.dataset = root.join("data");
    config.paths.out_dir = root.join(out);
    config
}

#[test]
fn planted_entities_are_recovered() {
    let ds = generate(&SynthSpec {
        n_tables: 4,
        n_entities: 10,
        presence_prob: 1.0,
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut config = PipelineConfig::default();
    config.tcem.lambda = 0.3;
    let run = run_on_dataset(&ds, &config).unwrap();
    assert_eq!(&run.result.clusters, ds.ground_truth.as_ref().unwrap());
    assert!(run.report.unwrap().is_perfect());
}

#[test]
fn writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    write_synth(&root.path().join("data"), &noisy(1));
    let config = config_for(root.path(), "out");
    let run = run_pipeline(&config).unwrap();
    let out = &config.paths.out_dir;
    for name in [
        artifacts::COORDINATED,
        artifacts::PAIRS,
        artifacts::MERGED,
        artifacts::FINAL,
        artifacts::LABELS,
        artifacts::REPORT_JSON,
        artifacts::REPORT_TXT,
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert!(!out.join(artifacts::ERROR).exists());
    assert_eq!(read_clusters(&out.join(artifacts::FINAL)).unwrap(), run.result.clusters);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(artifacts::REPORT_JSON)).unwrap()).unwrap();
    let f1 = report["report"]["f1"].as_f64().unwrap();
    assert!((f1 - run.report.as_ref().unwrap().f1).abs() < 1e-12);
    let labels = std::fs::read_to_string(out.join(artifacts::LABELS)).unwrap();
    let h = run.label_histogram().unwrap();
    assert_eq!(labels.lines().count() - 1, h.core + h.reachable + h.noise);
}

#[test]
fn warm_cache_reproduces_the_cold_run() {
    let root = tempfile::tempdir().unwrap();
    write_synth(&root.path().join("data"), &noisy(2));
    let mut config = config_for(root.path(), "cold");
    config.paths.cache_dir = Some(root.path().join("cache"));
    let cold = run_pipeline(&config).unwrap();
    assert!(cold.timings.iter().all(|t| !t.cached));
    config.paths.out_dir = root.path().join("warm");
    let warm = run_pipeline(&config).unwrap();
    for stage in ["coordinate", "embed", "match"] {
        let t = warm.timings.iter().find(|t| t.stage == stage).unwrap();
        assert!(t.cached, "{stage} not served from cache");
    }
    assert_eq!(cold.report, warm.report);
    for name in [artifacts::PAIRS, artifacts::FINAL, artifacts::COORDINATED] {
        assert_eq!(
            std::fs::read(root.path().join("cold").join(name)).unwrap(),
            std::fs::read(root.path().join("warm").join(name)).unwrap(),
            "{name}"
        );
    }

    // a different threshold reuses the candidates but changes nothing upstream
    config.tcem.lambda = 0.15;
    config.paths.out_dir = root.path().join("other");
    let other = run_pipeline(&config).unwrap();
    assert!(other.timings.iter().find(|t| t.stage == "embed").unwrap().cached);
    assert!(other.result.tcem.pairs.len() <= cold.result.tcem.pairs.len());
}

#[test]
fn identical_runs_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    write_synth(&root.path().join("data"), &noisy(3));
    let a = config_for(root.path(), "a");
    let b = config_for(root.path(), "b");
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    for name in [artifacts::PAIRS, artifacts::MERGED, artifacts::FINAL, artifacts::LABELS] {
        assert_eq!(
            std::fs::read(a.paths.out_dir.join(name)).unwrap(),
            std::fs::read(b.paths.out_dir.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn disabling_pruning_reports_merged_clusters() {
    let root = tempfile::tempdir().unwrap();
    write_synth(&root.path().join("data"), &noisy(4));
    let mut config = config_for(root.path(), "out");
    config.eval.disable_dpm = true;
    let run = run_pipeline(&config).unwrap();
    assert!(run.result.pruned.is_none());
    let out = &config.paths.out_dir;
    assert_eq!(
        std::fs::read(out.join(artifacts::MERGED)).unwrap(),
        std::fs::read(out.join(artifacts::FINAL)).unwrap()
    );
    assert!(!out.join(artifacts::LABELS).exists());
}

#[test]
fn failure_leaves_error_json() {
    let root = tempfile::tempdir().unwrap();
    let config = config_for(root.path(), "out");
    let err = run_pipeline(&config).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    let text = std::fs::read_to_string(config.paths.out_dir.join(artifacts::ERROR)).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value["error"].as_str().unwrap().contains("data"));
    assert_eq!(value["completed_stages"], serde_json::json!([]));
}

#[test]
fn failure_after_coordination_lists_completed_stages() {
    let root = tempfile::tempdir().unwrap();
    write_synth(&root.path().join("data"), &noisy(5));
    let mut config = config_for(root.path(), "out");
    config.embedder.kind = multimatch::embed::EmbedderKind::ExternalService;
    config.embedder.endpoint = Some("http://127.0.0.1:9/unreachable".into());
    config.embedder.retry_limit = 0;
    config.embedder.timeout_secs = 2.0;
    let err = run_pipeline(&config).unwrap_err();
    assert!(matches!(err, Error::Embedding { .. }), "{err}");
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config.paths.out_dir.join(artifacts::ERROR)).unwrap()).unwrap();
    assert_eq!(value["completed_stages"], serde_json::json!(["coordinate"]));
}

#[test]
fn missing_truth_skips_scoring() {
    let mut ds = generate(&noisy(6)).unwrap();
    ds.ground_truth = None;
    let run = run_on_dataset(&ds, &PipelineConfig::default()).unwrap();
    assert!(run.report.is_none());
    assert!(!run.result.clusters.is_empty());
}
