use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vadet_cli::eval::EvalReport;
use vadet_cli::RunManifest;
use vadet_core::scoring::{frame_auc, read_scores_csv};

const TINY: &str = r#"{
  "data": {"height": 32, "width": 32, "length": 10, "train_clips": 3, "test_clips": 2,
           "objects": 2, "min_size": 5, "max_size": 7, "context": 4, "anomaly_len": [2, 4]},
  "train": {"t": 4, "epochs": 1, "max_steps": 2, "batch_size": 2, "eval_every": 2,
            "model": {"base_channels": 8, "codes": 16, "ssm_state": 4}},
  "fr": {"lr": 0.001}
}"#;

fn vadet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vadet")).args(args).output().expect("spawn vadet")
}

fn ok(args: &[&str]) -> String {
    let out = vadet(args);
    assert!(
        out.status.success(),
        "vadet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scores(path: &Path, rows: &[(&str, usize, f64, f64, u8)]) {
    let mut text = String::from("clip_id,frame_index,s_p,s_r,fused,label\n");
    for (clip, k, p, r, l) in rows {
        text.push_str(&format!("{clip},{k},{p},{r},NaN,{l}\n"));
    }
    fs::write(path, text).unwrap();
}

fn read_report(path: &Path) -> EvalReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_reports_per_clip_selection_and_pooled_aucs() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    write_scores(
        &scores,
        &[
            // clip a: prediction separates perfectly
            ("test/a", 4, 0.1, 0.5, 0),
            ("test/a", 5, 0.2, 0.1, 0),
            ("test/a", 6, 0.8, 0.4, 1),
            ("test/a", 7, 0.9, 0.3, 1),
            // clip b: reconstruction is better
            ("test/b", 4, 0.9, 0.1, 0),
            ("test/b", 5, 0.1, 0.2, 0),
            ("test/b", 6, 0.8, 0.7, 1),
            ("test/b", 7, 0.2, 0.8, 1),
        ],
    );
    let stdout = ok(&["eval", "--scores", s(&scores)]);
    assert!(stdout.contains("overall fused AUC"));
    let report = read_report(&dir.path().join("report.json"));
    let sel: Vec<&str> = report.clips.iter().map(|c| c.selection.as_str()).collect();
    assert_eq!(sel, ["FP", "FR"]);
    assert_eq!(report.clips[1].auc_fp, 0.5);
    assert_eq!(report.clips[1].auc_fr, 1.0);
    assert_eq!(report.clips[1].auc_fused, 1.0);

    let labels = [0, 0, 1, 1, 0, 0, 1, 1];
    let fused = [0.1, 0.2, 0.8, 0.9, 0.1, 0.2, 0.7, 0.8];
    let s_p = [0.1, 0.2, 0.8, 0.9, 0.9, 0.1, 0.8, 0.2];
    assert_eq!(report.overall_fused, Some(frame_auc(&fused, &labels).unwrap().value));
    assert_eq!(report.overall_fp, Some(frame_auc(&s_p, &labels).unwrap().value));
    assert!(!report.degenerate);
    manifest_at(&dir.path().join("manifest_eval.json"), "eval");
}

#[test]
fn eval_of_single_class_labels_is_undefined_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    write_scores(&scores, &[("test/a", 4, 0.1, 0.5, 0), ("test/a", 5, 0.7, 0.2, 0)]);
    let out = dir.path().join("out");
    let stdout = ok(&["eval", "--scores", s(&scores), "--out", s(&out)]);
    assert!(stdout.contains("undefined"), "{stdout}");
    let report = read_report(&out.join("report.json"));
    assert!(report.degenerate && report.clips[0].degenerate);
    assert_eq!((report.overall_fused, report.overall_fp, report.overall_fr), (None, None, None));
}

fn manifest_at(path: &Path, sub: &str) -> RunManifest {
    let m = RunManifest::read(path).unwrap();
    assert_eq!(m.subcommand, sub);
    assert!(m.argv.iter().any(|a| a == sub), "{:?}", m.argv);
    assert!(!m.build.is_empty() && m.wall_seconds >= 0.0);
    m
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    fp: PathBuf,
    fr: PathBuf,
}

fn tiny_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.json");
    fs::write(&config, TINY).unwrap();
    let c = s(&config);
    let data = root.join("data");
    ok(&["--config", c, "--seed", "3", "generate-data", "--out", s(&data)]);
    ok(&["--config", c, "train-fp", "--data", s(&data), "--out", s(&root.join("fp"))]);
    let fp = manifest_at(&root.join("fp/manifest_train-fp.json"), "train-fp").outputs["checkpoint"].clone();
    ok(&["--config", c, "train-fr", "--data", s(&data), "--out", s(&root.join("fr")), "--fp", s(&fp), "--max-steps", "1"]);
    let fr = manifest_at(&root.join("fr/manifest_train-fr.json"), "train-fr").outputs["checkpoint"].clone();
    Pipeline {
        _dir: dir,
        root,
        config,
        fp,
        fr,
    }
}

#[test]
fn pipeline_manifests_overrides_and_deterministic_scores() {
    let p = tiny_pipeline();
    let data = p.root.join("data");
    let gen = manifest_at(&data.join("manifest_generate-data.json"), "generate-data");
    assert_eq!(gen.seed, 3);
    assert_eq!(gen.config["height"], 32);
    assert!(data.join("train").is_dir() && data.join("test").is_dir());

    let fp = manifest_at(&p.root.join("fp/manifest_train-fp.json"), "train-fp");
    assert_eq!(fp.config["max_steps"], 2);
    assert_eq!(fp.config["lr"], 5e-3);
    assert_eq!(fp.inputs["config"], p.config);
    // `fr` overrides apply to the second stage only; flags beat the file
    let fr = manifest_at(&p.root.join("fr/manifest_train-fr.json"), "train-fr");
    assert_eq!(fr.config["lr"], 1e-3);
    assert_eq!(fr.config["max_steps"], 1);
    assert_eq!(fr.config["t"], 4);
    assert_eq!(fr.inputs["fp"], p.fp);

    let mut csvs = vec![];
    for run in ["s1", "s2"] {
        let out = p.root.join(run);
        ok(&["--config", s(&p.config), "score", "--data", s(&data), "--fp", s(&p.fp), "--fr", s(&p.fr), "--out", s(&out)]);
        let m = manifest_at(&out.join("manifest_score.json"), "score");
        assert!(m.fps.is_some_and(|f| f > 0.0));
        assert_eq!(m.outputs["scores"], out.join("scores.csv"));
        assert!(out.join("curves").join("test_clip_000.dat").is_file());
        csvs.push(fs::read_to_string(out.join("scores.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let series = read_scores_csv(&p.root.join("s1/scores.csv")).unwrap();
    assert_eq!(series.len(), 2);
    for x in &series {
        assert_eq!(x.first_frame, 4);
        assert_eq!(x.labels.len(), 6);
        for v in x.s_p.iter().chain(&x.s_r).chain(&x.fused) {
            assert!((0.0..=1.0).contains(v), "{v}");
        }
    }
}

#[test]
fn experiment_t_writes_a_two_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["--config", s(&config), "generate-data", "--out", s(&data)]);
    let out = dir.path().join("exp");
    let stdout = ok(&[
        "--config",
        s(&config),
        "experiment-t",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--ts",
        "2,3",
        "--max-steps",
        "1",
    ]);
    assert!(stdout.contains("MIX"), "{stdout}");
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,t=2,t=3");
    assert!(lines[1].starts_with("FP,") && lines[2].starts_with("MIX,"));
    assert_eq!(lines.len(), 3);
    assert!(out.join("table_pooled.csv").is_file());
    assert!(out.join("t2/scores.csv").is_file() && out.join("t3/scores.csv").is_file());
    manifest_at(&out.join("manifest_experiment-t.json"), "experiment-t");
}

#[test]
fn bench_scan_writes_rows_for_each_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let stdout = ok(&["bench-scan", "--lengths", "16,32", "--reps", "1", "--out", s(&out)]);
    assert!(stdout.contains("ratio"), "{stdout}");
    let csv = fs::read_to_string(out.join("bench_scan.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("naive_ns_per_elem") && lines[0].contains("fast_ns_per_elem"));
    assert!(lines[1].starts_with("16,") && lines[2].starts_with("32,"));
    let m = manifest_at(&out.join("manifest_bench-scan.json"), "bench-scan");
    assert_eq!(m.config["reps"], 1);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| vadet(args).status.code();
    // data: missing inputs
    let missing = dir.path().join("nowhere");
    assert_eq!(code(&["eval", "--scores", s(&missing.join("scores.csv"))]), Some(3));
    assert_eq!(code(&["train-fp", "--data", s(&missing), "--out", s(&dir.path().join("o"))]), Some(3));
    // config: unreadable or invalid settings
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&["--config", s(&bad), "bench-scan", "--out", s(&dir.path().join("b"))]), Some(2));
    let odd = dir.path().join("odd.json");
    fs::write(&odd, r#"{"data": {"height": 30}}"#).unwrap();
    assert_eq!(code(&["--config", s(&odd), "generate-data", "--out", s(&dir.path().join("d"))]), Some(2));
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"score": {"scope": "sideways"}}"#).unwrap();
    assert_eq!(code(&["--config", s(&unknown), "bench-scan", "--out", s(&dir.path().join("b"))]), Some(2));
    // usage errors are clap's own
    assert_eq!(code(&["no-such-command"]), Some(2));
}

#[test]
fn scoring_rejects_swapped_checkpoints_as_data_errors() {
    let p = tiny_pipeline();
    let out = vadet(&[
        "score",
        "--data",
        s(&p.root.join("data")),
        "--fp",
        s(&p.fr),
        "--fr",
        s(&p.fp),
        "--out",
        s(&p.root.join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
