use std::path::Path;
use std::process::{Command, Output};

fn multimatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multimatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, seed: &str) {
    let out = multimatch(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--entities",
        "60",
        "--typo",
        "0.05",
        "--unit-mangle",
        "0.3",
        "--time-format",
        "0.3",
        "--decoy",
        "0.2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("wrote 4 tables"));
}

#[test]
fn score_against_itself_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "1");
    let truth = data.join("ground_truth.csv");
    let out = multimatch(&["score", truth.to_str().unwrap(), truth.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let f1 = text.lines().find(|l| l.starts_with("f1")).unwrap();
    assert!(f1.ends_with("1.0000"), "{f1}");
}

#[test]
fn match_is_deterministic_and_cacheable() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "7");
    let cache = root.path().join("cache");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out_dir = root.path().join(run);
        let out = multimatch(&[
            "match",
            "--dataset",
            data.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--cache-dir",
            cache.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("f1"));
        files.push(std::fs::read(out_dir.join("clusters_final.csv")).unwrap());
        let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
        if run == "b" {
            assert!(report.contains("(cached)"), "{report}");
        }
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn sweep_prints_one_row_per_grid_point() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "3");
    let out = multimatch(&[
        "sweep",
        "--dataset",
        data.to_str().unwrap(),
        "--param",
        "lambda",
        "--grid",
        "0.1:0.9:0.1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "value,precision,recall,f1");
    assert_eq!(lines.len(), 10);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));

    let csv = root.path().join("d.csv");
    let out = multimatch(&[
        "sweep",
        "--dataset",
        data.to_str().unwrap(),
        "--param",
        "d",
        "--grid",
        "0.1:0.5:0.2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 4);
}

#[test]
fn ablation_with_pruning_disabled() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "5");
    let out = multimatch(&["ablate", "--dataset", data.to_str().unwrap(), "--disable", "dpm"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let merged = text.lines().find(|l| l.starts_with("stage.merged_clusters")).unwrap();
    let final_ = text.lines().find(|l| l.starts_with("stage.final_clusters")).unwrap();
    assert_eq!(merged.split_whitespace().last(), final_.split_whitespace().last());
}

#[test]
fn print_config_round_trips() {
    let out = multimatch(&["match", "--lambda", "0.25", "--print-config"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("lambda = 0.25"), "{text}");
}

#[test]
fn bad_arguments_fail_with_usage() {
    let out = multimatch(&["sweep", "--param", "nonsense", "--grid", "0:1:0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--param"));

    let out = multimatch(&["sweep", "--grid", "0:1:0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = multimatch(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let root = tempfile::tempdir().unwrap();
    let out = multimatch(&["match", "--dataset", root.path().join("missing").to_str().unwrap(), "--out-dir", root.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(root.path().join("o").join("error.json").is_file());
}
