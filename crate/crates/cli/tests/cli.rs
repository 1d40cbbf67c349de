use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--P",
    "32",
    "--delta",
    "16",
    "--d-z",
    "8",
    "--c-e",
    "2",
    "--steps",
    "3",
    "--batch-anchors",
    "64",
];

fn vace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, count: &str) {
    let out = vace(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        count,
        "--len",
        "600",
        "--channels",
        "2",
        "--ratio",
        "0.04",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_labeled_csvs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    let files = csv_files(dir.path());
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",Label"));
    assert_eq!(text.lines().count(), 601);
}

#[test]
fn run_then_metrics_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let input = csv_files(dir.path()).remove(0);
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "run",
        input.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = vace(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["seed"], 3);

    let scores = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".scores.csv"))
        .expect("scores file");
    for suffix in [".encoder.bin", ".model.json", ".metrics.json", ".trace.csv"] {
        let name = scores.to_string_lossy().replace(".scores.csv", suffix);
        assert!(Path::new(&name).exists(), "missing {name}");
    }
    let out = vace(&["metrics", scores.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["auc_roc", "auc_pr", "vus_roc", "vus_pr", "point_f1", "range_f1"] {
        assert_eq!(metrics[key], printed[key], "{key}");
    }
}

#[test]
fn bench_counts_every_series_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "bench",
        dir.path().to_str().unwrap(),
        "--seeds",
        "0,1",
        "--workers",
        "2",
        "--no-global-znorm",
        "--out",
    ];
    args.push(out_dir.to_str().unwrap());
    args.extend_from_slice(SMALL);
    let out = vace(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 6);
    assert!(summary["aggregate"].is_object());
}

#[test]
fn corrupt_file_gives_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    std::fs::write(dir.path().join("bad_tr_5_.csv"), "a,Label\n1,0\nnan,0\n").unwrap();
    let mut args = vec!["bench", dir.path().to_str().unwrap(), "--seed", "0"];
    args.extend_from_slice(SMALL);
    assert_eq!(vace(&args).status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"delta": 0}"#).unwrap();
    let out = vace(&[
        "bench",
        dir.path().to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&config, r#"{"not_a_key": 1}"#).unwrap();
    let out = vace(&[
        "bench",
        dir.path().to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_directory_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_eq!(vace(&args).status.code(), Some(1));
}

#[test]
fn geometry_prints_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let mut args = vec!["geometry", dir.path().to_str().unwrap(), "--seed", "0"];
    args.extend_from_slice(SMALL);
    let out = vace(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    // header plus full, no-pretext and no-batchnorm rows
    assert_eq!(text.lines().count(), 4, "{text}");
}
