mod common;

use std::path::Path;

use csep_core::masks::{self, PercentileMethod};
use csep_core::pipeline::{self, ComponentMode, PipelineError, RunConfig};
use csep_core::report::{self, ReportFormat};
use csep_core::synth::{self, SyntheticSceneSpec};
use csep_core::ThresholdKind;

fn config(input: &Path, output: &Path) -> RunConfig {
    RunConfig { input_dir: input.into(), output_dir: output.into(), parallelism: 2, ..RunConfig::default() }
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn one_pair_one_policy_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let pair = synth::synth_fixture(&SyntheticSceneSpec::disjoint(16, 8)).unwrap();
    synth::write_pair(&pair, dir.path().join("in")).unwrap();
    let report = pipeline::run_pipeline(&config(&dir.path().join("in"), &dir.path().join("out"))).unwrap();
    assert_eq!(report.exit_code(), 0);
    assert_eq!(data_rows(&dir.path().join("out/records.csv")), 1);
}

#[test]
fn ten_pairs_full_grid_is_180_rows() {
    let dir = tempfile::tempdir().unwrap();
    common::write_separated_corpus(&dir.path().join("in"), 10, 1, 0.0, 2);
    let cfg = RunConfig {
        fixed_thresholds: masks::decile_grid(),
        percentiles: masks::decile_grid(),
        ..config(&dir.path().join("in"), &dir.path().join("out"))
    };
    let report = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(report.records, 180);
    assert_eq!(data_rows(&dir.path().join("out/records.csv")), 180);
    assert_eq!(data_rows(&dir.path().join("out/sweep.csv")), 18);

    // Sweep mean support: non-increasing in tau, above the percentile bound.
    let fixed: Vec<f64> = report
        .sweep
        .iter()
        .filter(|p| p.policy_kind == ThresholdKind::Fixed)
        .map(|p| p.mean_support.unwrap())
        .collect();
    assert!(fixed.windows(2).all(|w| w[0] >= w[1]), "{fixed:?}");
    let pixels = 16.0 * 12.0;
    for p in report.sweep.iter().filter(|p| p.policy_kind == ThresholdKind::Percentile) {
        assert!(p.mean_support.unwrap() >= (1.0 - p.policy_value) * pixels - 1e-9, "{p:?}");
    }
}

#[test]
fn corrupt_pair_is_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    common::write_separated_corpus(&input, 4, 1, 0.0, 3);
    let dump = input.join("pair_0002/dump.bin");
    let mut bytes = std::fs::read(&dump).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&dump, bytes).unwrap();
    // A second failure mode: manifest span past the token list.
    let manifest_path = input.join("pair_0003/manifest.json");
    let mut manifest = csep_core::Manifest::from_json_file(&manifest_path).unwrap();
    manifest.style_span = csep_core::TokenSpan::new(40, 41);
    manifest.to_json_file(&manifest_path).unwrap();

    let report = pipeline::run_pipeline(&config(&input, &dir.path().join("out"))).unwrap();
    assert_eq!(report.exit_code(), 1);
    assert_eq!((report.pairs_found, report.pairs_analyzed), (4, 2));
    assert_eq!(report.errors.len(), 2);
    assert_eq!((report.errors[0].pair.as_str(), report.errors[0].stage.as_str()), ("pair_0002", "dump"));
    assert!(report.errors[0].message.contains("truncated"));
    assert_eq!(report.errors[1].stage, "validate");
    assert!(!report.errors[1].issues.is_empty());

    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(saved["errors"].as_array().unwrap().len(), 2);
    assert_eq!(data_rows(&dir.path().join("out/records.csv")), 2);
}

#[test]
fn empty_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::run_pipeline(&config(dir.path(), &dir.path().join("out"))).unwrap_err();
    assert!(matches!(err, PipelineError::EmptyInput(_)));
}

#[test]
fn meta_block_records_conventions() {
    let dir = tempfile::tempdir().unwrap();
    common::write_separated_corpus(&dir.path().join("in"), 3, 1, 0.0, 4);
    let cfg = RunConfig {
        percentiles: vec![0.5],
        component_mode: ComponentMode::FirstToken,
        percentile_method: PercentileMethod::Linear,
        formats: vec![ReportFormat::Json],
        ..config(&dir.path().join("in"), &dir.path().join("out"))
    };
    pipeline::run_pipeline(&cfg).unwrap();
    let out = dir.path().join("out");
    assert!(!out.join("records.csv").exists());
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let meta = &saved["meta"];
    assert_eq!(meta["fusion"], "first-token");
    assert_eq!(meta["percentile_method"], "linear");
    assert_eq!(meta["effect_size_convention"], "pooled-sd");
    assert_eq!(meta["upsample"]["cubic_coefficient"], -0.75);
    assert_eq!(meta["policies"].as_array().unwrap().len(), 2);
    let records = report::read_records_file(out.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
}

#[test]
fn fused_and_first_token_differ_on_multi_token_spans() {
    // Second token of "hot dog" carries a different region than the first.
    let spec = SyntheticSceneSpec { content: "hot dog".into(), ..SyntheticSceneSpec::disjoint(16, 8) };
    let pair = synth::synth_fixture(&spec).unwrap();
    let mut dump = pair.dump.clone();
    let n = dump.n_tokens();
    let second = pair.manifest.content_span.end;
    for r in &mut dump.records {
        for (i, px) in r.values.chunks_exact_mut(n).enumerate() {
            px[second] = if i % 16 >= 12 { 1.0 } else { 0.0 };
        }
    }
    let fused = pipeline::build_pair_maps(&dump, &pair.manifest, &Default::default(), ComponentMode::Fused).unwrap();
    let first =
        pipeline::build_pair_maps(&dump, &pair.manifest, &Default::default(), ComponentMode::FirstToken).unwrap();
    assert_ne!(fused.content.values, first.content.values);
    assert_eq!(fused.style.values, first.style.values);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    common::write_separated_corpus(&dir.path().join("in"), 5, 2, 0.1, 8);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        pipeline::run_pipeline(&config(&dir.path().join("in"), &out)).unwrap();
        outputs.push(
            ["records.csv", "records.jsonl", "sweep.csv", "report.json"].map(|f| std::fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}
