use std::path::Path;
use std::process::{Command, Output};

fn csep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csep")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn corpus_gen_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = csep(&["corpus", "gen", "--out", p(dir.path())]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(dir.path().join("prompts.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 16_000);
    assert!(text.lines().next().unwrap().contains("\"a painting of a person in the Albrecht Durer style\""));
}

#[test]
fn corpus_gen_custom_lists() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), "cow\napple\n").unwrap();
    std::fs::write(dir.path().join("s.tsv"), "Rembrandt\tartist\nPop Art\tmovement\n").unwrap();
    let out = dir.path().join("out");
    let o = csep(&[
        "corpus",
        "gen",
        "--contents",
        p(&dir.path().join("c.txt")),
        "--styles",
        p(&dir.path().join("s.tsv")),
        "--templates",
        "4",
        "--fix-articles",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(out.join("prompts.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("\"a cow with Rembrandt style\""));
    assert!(text.contains("\"an apple with Pop Art style\""));
}

#[test]
fn synth_validate_analyze_sweep_summarize_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let out = dir.path().join("out");
    let o = csep(&[
        "synth",
        "--preset",
        "separated",
        "--count",
        "6",
        "--width",
        "20",
        "--height",
        "12",
        "--out",
        p(&input),
    ]);
    assert!(o.status.success(), "{o:?}");

    let o = csep(&["validate", p(&input)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("6/6 pairs valid"));

    let o = csep(&[
        "analyze",
        "--input",
        p(&input),
        "--output",
        p(&out),
        "--full-grid",
        "--parallelism",
        "3",
        "--export-maps",
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 6 * 18);
    assert!(out.join("maps/pair_0000/content.png").exists());

    let o = csep(&["sweep", "--records", p(&out.join("records.jsonl")), "--format", "json"]);
    assert!(o.status.success());
    let points: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 18);

    let o = csep(&[
        "summarize",
        "--records",
        p(&out.join("records.csv")),
        "--group-by",
        "style",
        "--policy",
        "percentile:0.9",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next().unwrap(), "label,kind,mean_delta,sd_delta,n");
    assert_eq!(stdout(&o).lines().count(), 7);

    let png = dir.path().join("o.png");
    let o = csep(&["overlay", "--map", p(&out.join("maps/pair_0001/style.dmap")), "--out", p(&png)]);
    assert!(o.status.success(), "{o:?}");
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
    let o = csep(&["overlay", "--pair", p(&input.join("pair_0001")), "--component", "content", "--out", p(&png)]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    assert!(csep(&["synth", "--preset", "disjoint", "--out", p(&input)]).status.success());
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "input_dir": input,
            "output_dir": dir.path().join("from_config"),
            "fixed_thresholds": [0.3, 0.4],
            "formats": ["csv"],
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("from_flag");
    let o = csep(&["analyze", "--config", p(&config), "--output", p(&out), "--fixed", "0.5"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 2);
    assert!(records.lines().nth(1).unwrap().contains(",fixed,0.5,"));
    assert!(!out.join("records.jsonl").exists());
    assert!(!dir.path().join("from_config").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    assert!(csep(&["synth", "--preset", "entangled", "--count", "3", "--out", p(&input)]).status.success());

    // Invalid configuration.
    let o = csep(&["analyze", "--input", p(&input), "--output", p(&dir.path().join("o1")), "--percentiles", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"thresholds": [0.4]}"#).unwrap();
    assert_eq!(csep(&["analyze", "--config", p(&bad)]).status.code(), Some(2));

    // One corrupt pair: partial failure, the rest still analyzed.
    std::fs::write(input.join("pair_0001/dump.bin"), b"DAMX").unwrap();
    let out = dir.path().join("o2");
    let o = csep(&["analyze", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pair_0001"));
    assert_eq!(std::fs::read_to_string(out.join("records.csv")).unwrap().lines().count(), 3);
    assert_eq!(csep(&["validate", p(&input)]).status.code(), Some(1));

    // Nothing to analyze.
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = csep(&["analyze", "--input", p(&empty), "--output", p(&dir.path().join("o3"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn synth_single_pair_writes_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pair");
    assert!(csep(&["synth", "--preset", "half-overlap", "--width", "16", "--height", "4", "--out", p(&out)])
        .status
        .success());
    let expected: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("expected.json")).unwrap()).unwrap();
    assert!((expected["iou_cs"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(out.join("manifest.json").exists() && out.join("dump.bin").exists());
}
