use std::path::Path;
use std::process::{Command, Output};

use sqlf::io::{ingest_csv, CsvSchema};

fn sqlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&sqlf(&["--help"])), 0);
    assert_eq!(code(&sqlf(&["--no-such-flag", "pipeline"])), 1);
    assert_eq!(code(&sqlf(&["frobnicate"])), 1);
    assert_eq!(code(&sqlf(&["--set", "unet.lerning_rate=1", "pipeline"])), 1);
    assert_eq!(code(&sqlf(&["--stage", "nowhere", "pipeline"])), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("missing.csv");
    let o = sqlf(&["--out", out.to_str().unwrap(), "ingest", "--input", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "text,other\nselect 1,0\n").unwrap();
    let o = sqlf(&["--out", out.to_str().unwrap(), "ingest", "--input", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn tokenize_prints_tokens() {
    let o = sqlf(&["tokenize", "SELECT * FROM t WHERE id = 1 OR 1=1"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("SELECT") || text.contains("select"), "{text}");
    assert!(!text.contains("<pad>"));
}

#[test]
fn gen_corpus_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.csv");
    let o = sqlf(&["--seed", "4", "gen-corpus", "--n", "120", "--output", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = ingest_csv(&path, &CsvSchema::default()).unwrap();
    assert_eq!(report.queries.len(), 120);
    assert!(report.skipped.is_empty());
    assert_eq!(report.queries, sqlf::io::desk_corpus(120, sqlf::rng::derive_seed(4, "ingest")));
}

#[test]
fn gradcheck_passes() {
    let o = sqlf(&["gradcheck", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn tiny_pipeline_exports_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = sqlf(&["--profile", "tiny", "--seed", "3", "--out", out.to_str().unwrap(), "pipeline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = out.join("reports");

    let summary: serde_json::Value = serde_json::from_str(&read(&reports.join("summary.json"))).unwrap();
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary, printed);
    let schema: serde_json::Value =
        serde_json::from_str(&read(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/summary.schema.json"))).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&summary).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");

    let holdout = summary["corpus"]["holdout_rows"].as_u64().unwrap();
    for name in ["confusion.csv", "confusion_baseline.csv"] {
        let text = read(&reports.join(name));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("tn,fp,fn,tp"));
        let counts: Vec<u64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(counts.len(), 4);
        assert_eq!(counts.iter().sum::<u64>(), holdout);
        assert!(lines.next().is_none());
    }

    let cfg = sqlf::config::PipelineConfig::tiny();
    let grid = read(&reports.join("grid.csv"));
    assert_eq!(grid.lines().count() - 1, cfg.grid.p1.len() * cfg.grid.p2.len());

    for name in ["vae_history.csv", "unet_history.csv", "cwgan_history.csv", "quality.csv", "pca_scatter.csv", "classification_report.txt"] {
        assert!(reports.join(name).is_file(), "{name}");
    }

    // later stage commands reuse the finished run
    let synth = dir.path().join("synth.csv");
    let o = sqlf(&["--profile", "tiny", "--seed", "3", "--out", out.to_str().unwrap(), "synth", "--source", "cwgan", "--n", "6", "--class", "1", "--output", synth.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let drawn = ingest_csv(&synth, &CsvSchema::default()).unwrap();
    assert_eq!(drawn.queries.len() + drawn.skipped.len(), 6);
    assert!(drawn.queries.iter().all(|q| q.label == 1));
    let corpus = out.join("corpus.csv");
    let o = sqlf(&["--profile", "tiny", "--seed", "3", "--out", out.to_str().unwrap(), "evaluate", "--input", corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 11\n[corpus]\ngenerate = 200\n").unwrap();
    let out = dir.path().join("run");
    let o = sqlf(&[
        "--profile",
        "tiny",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "corpus.generate=180",
        "--out",
        out.to_str().unwrap(),
        "--stage",
        "ingest",
        "pipeline",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["seed"], 11);
    assert_eq!(summary["corpus"]["rows"], 180);
    assert_eq!(summary["completed"], serde_json::json!(["ingest"]));
}
