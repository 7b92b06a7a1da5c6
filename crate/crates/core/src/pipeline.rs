//! Directory-level analysis: every (manifest, dump) pair under an input
//! directory through maps, masks, records, sweep and summaries.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daam::{self, AttributionMap, DaamError, Grid, MapSource, UpsampleSpec};
use crate::dump::{self, AttentionDump, Manifest, ValidationIssue};
use crate::masks::{self, ImageMaps, MaskError, PercentileMethod, SeparationRecord, ThresholdKind, ThresholdPolicy};
use crate::overlay;
use crate::report::{self, ReportError, ReportFormat};
use crate::stats::{self, ComponentSummary, EffectSizeConvention, GroupBy, SweepPoint, Tail};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("invalid threshold: {0}")]
    Threshold(#[from] MaskError),
    #[error("threshold {0} listed twice")]
    DuplicateThreshold(ThresholdPolicy),
    #[error("invalid upsample spec: {0}")]
    Upsample(#[from] DaamError),
    #[error("no report formats selected")]
    NoFormats,
    #[error("cannot read config {path}: {message}")]
    Load { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot list input directory {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error("no manifest.json found under {0}")]
    EmptyInput(PathBuf),
    #[error("cannot write output: {0}")]
    Output(#[from] ReportError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// How the content and style maps are formed from their token spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentMode {
    /// Raw aggregates summed over the span, normalized once.
    #[default]
    Fused,
    /// Map of the span's first token only.
    FirstToken,
}

impl ComponentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentMode::Fused => "sum-raw-then-normalize",
            ComponentMode::FirstToken => "first-token",
        }
    }
}

/// Full configuration of an analysis run; the JSON config file mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub fixed_thresholds: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub upsample: UpsampleSpec,
    pub component_mode: ComponentMode,
    pub percentile_method: PercentileMethod,
    pub effect_size: EffectSizeConvention,
    pub tail: Tail,
    /// Worker threads; 0 uses all available cores.
    pub parallelism: usize,
    pub formats: Vec<ReportFormat>,
    /// Also write per-pair component maps and overlays under `maps/`.
    pub export_maps: bool,
    pub overlay_opacity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("."),
            output_dir: PathBuf::from("out"),
            fixed_thresholds: vec![0.4],
            percentiles: Vec::new(),
            upsample: UpsampleSpec::default(),
            component_mode: ComponentMode::default(),
            percentile_method: PercentileMethod::default(),
            effect_size: EffectSizeConvention::default(),
            tail: Tail::default(),
            parallelism: 0,
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
            export_maps: false,
            overlay_opacity: 0.6,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let load = |message: String| ConfigError::Load { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| load(e.to_string()))
    }

    /// Fixed thresholds first, then percentiles, each in listed order.
    pub fn policies(&self) -> Result<Vec<ThresholdPolicy>, ConfigError> {
        let mut out: Vec<ThresholdPolicy> = Vec::new();
        let fixed = self.fixed_thresholds.iter().map(|&t| ThresholdPolicy::fixed(t));
        let pct = self.percentiles.iter().map(|&p| ThresholdPolicy::percentile(p));
        for policy in fixed.chain(pct) {
            let policy = policy?;
            if out.iter().any(|p| p.key() == policy.key()) {
                return Err(ConfigError::DuplicateThreshold(policy));
            }
            out.push(policy);
        }
        if out.is_empty() {
            return Err(ConfigError::EmptyGrid);
        }
        Ok(out)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.policies()?;
        self.upsample.check()?;
        if self.formats.is_empty() {
            return Err(ConfigError::NoFormats);
        }
        if !(0.0..=1.0).contains(&self.overlay_opacity) {
            return Err(ConfigError::Load {
                path: PathBuf::new(),
                message: format!("overlay_opacity {} outside [0, 1]", self.overlay_opacity),
            });
        }
        Ok(())
    }
}

/// Component and baseline-token maps for one image.
#[derive(Debug, Clone)]
pub struct PairMaps {
    pub content: AttributionMap,
    pub style: AttributionMap,
    pub tokens: Vec<(usize, AttributionMap)>,
}

impl PairMaps {
    pub fn as_image_maps(&self) -> ImageMaps<'_> {
        ImageMaps { content: &self.content, style: &self.style, tokens: &self.tokens }
    }
}

fn component_map(
    raws: &[(usize, Grid)],
    span: dump::TokenSpan,
    mode: ComponentMode,
) -> Result<AttributionMap, DaamError> {
    let pick = |i: usize| &raws.iter().find(|(j, _)| *j == i).expect("span token aggregated").1;
    let mut map = match mode {
        ComponentMode::Fused => {
            let parts: Vec<&Grid> = span.indices().map(pick).collect();
            let mut m = daam::normalize_map(&daam::sum_raw(&parts))?;
            m.source = MapSource::Span(span);
            m
        }
        ComponentMode::FirstToken => {
            let mut m = daam::normalize_map(pick(span.start))?;
            m.source = MapSource::Token(span.start);
            m
        }
    };
    if mode == ComponentMode::Fused && span.len() == 1 {
        map.source = MapSource::Span(span);
    }
    Ok(map)
}

/// Builds every map an image needs, aggregating each token once.
pub fn build_pair_maps(
    dump: &AttentionDump,
    manifest: &Manifest,
    upsample: &UpsampleSpec,
    mode: ComponentMode,
) -> Result<PairMaps, DaamError> {
    daam::check_span(manifest.content_span, &manifest.tokens, dump.n_tokens())?;
    daam::check_span(manifest.style_span, &manifest.tokens, dump.n_tokens())?;
    let others = masks::baseline_tokens(&manifest.tokens, manifest.content_span, manifest.style_span);
    let mut wanted: Vec<usize> = manifest.content_span.indices().chain(manifest.style_span.indices()).collect();
    wanted.extend(&others);
    wanted.sort_unstable();
    let raws: Vec<(usize, Grid)> =
        wanted.iter().copied().zip(daam::aggregate_tokens(dump, &wanted, upsample)?).collect();

    let content = component_map(&raws, manifest.content_span, mode)?;
    let style = component_map(&raws, manifest.style_span, mode)?;
    let tokens = others
        .iter()
        .map(|&i| {
            let raw = &raws.iter().find(|(j, _)| *j == i).expect("baseline token aggregated").1;
            let mut m = daam::normalize_map(raw)?;
            m.source = MapSource::Token(i);
            Ok((i, m))
        })
        .collect::<Result<Vec<_>, DaamError>>()?;
    Ok(PairMaps { content, style, tokens })
}

/// Why one pair produced no records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    /// Pair directory relative to the input directory.
    pub pair: String,
    pub stage: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<ValidationIssue>,
}

fn pair_error(pair: &str, stage: &str, message: impl ToString) -> PairError {
    PairError { pair: pair.to_string(), stage: stage.to_string(), message: message.to_string(), issues: Vec::new() }
}

/// Loads and validates one pair directory.
pub fn load_pair(dir: &Path, name: &str) -> Result<(AttentionDump, Manifest), PairError> {
    let manifest = Manifest::from_json_file(dir.join(MANIFEST_FILE)).map_err(|e| pair_error(name, "manifest", e))?;
    let dump = dump::read_dump_file(dir.join(&manifest.dump_path)).map_err(|e| pair_error(name, "dump", e))?;
    let report = dump::validate_pair(&dump, &manifest);
    if !report.is_ok() {
        let message = report.issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ");
        return Err(PairError { issues: report.issues, ..pair_error(name, "validate", message) });
    }
    Ok((dump, manifest))
}

/// Records for one loaded pair, one per policy in order.
pub fn analyze_pair(
    dump: &AttentionDump,
    manifest: &Manifest,
    config: &RunConfig,
    policies: &[ThresholdPolicy],
) -> Result<(PairMaps, Vec<SeparationRecord>), String> {
    let maps = build_pair_maps(dump, manifest, &config.upsample, config.component_mode).map_err(|e| e.to_string())?;
    let records = policies
        .iter()
        .map(|&p| masks::separation_record(maps.as_image_maps(), manifest, p, config.percentile_method))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok((maps, records))
}

/// Pair directories in name order: `input` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do.
pub fn discover_pairs(input: &Path) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let io = |source| PipelineError::Input { path: input.to_path_buf(), source };
    if input.join(MANIFEST_FILE).is_file() {
        let name = input.file_name().map_or(".".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, input.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(input).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() && path.join(MANIFEST_FILE).is_file() {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(PipelineError::EmptyInput(input.to_path_buf()));
    }
    Ok(out)
}

/// Every convention that affects the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub upsample: UpsampleSpec,
    pub normalization: String,
    pub fusion: String,
    pub percentile_method: String,
    pub mask_rule: String,
    pub baseline: String,
    pub effect_size_convention: String,
    pub tail: Tail,
    pub policies: Vec<ThresholdPolicy>,
    pub summary_policy: ThresholdPolicy,
}

impl ReportMeta {
    pub fn new(config: &RunConfig, policies: &[ThresholdPolicy]) -> Self {
        Self {
            tool: "csep".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            upsample: config.upsample,
            normalization: "global-max".into(),
            fusion: config.component_mode.as_str().into(),
            percentile_method: config.percentile_method.as_str().into(),
            mask_rule: "value >= cutoff".into(),
            baseline: "content and style masks against each non-special token outside both spans; \
                       content-style pair excluded; stopwords kept; empty unions skipped"
                .into(),
            effect_size_convention: config.effect_size.as_str().into(),
            tail: config.tail,
            policies: policies.to_vec(),
            summary_policy: policies[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub pairs_found: usize,
    pub pairs_analyzed: usize,
    pub records: usize,
    pub errors: Vec<PairError>,
    pub sweep: Vec<SweepPoint>,
    /// Plain mean of the per-policy effect sizes.
    pub mean_effect_size: Option<f64>,
    pub content_summaries: Vec<ComponentSummary>,
    pub style_summaries: Vec<ComponentSummary>,
    pub outputs: Vec<String>,
}

impl RunReport {
    /// 0 when every pair was analyzed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.errors.is_empty() && self.pairs_analyzed > 0 {
            0
        } else {
            1
        }
    }
}

/// In-memory result of a run, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<SeparationRecord>,
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new().num_threads(parallelism).build().map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Runs the analysis without touching the output directory.
pub fn analyze(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    config.check()?;
    let policies = config.policies()?;
    let pairs = discover_pairs(&config.input_dir)?;

    type PairResult = Result<(Vec<SeparationRecord>, Option<PairMaps>), PairError>;
    let results: Vec<PairResult> = pool(config.parallelism)?.install(|| {
        pairs
            .par_iter()
            .map(|(name, dir)| {
                let (dump, manifest) = load_pair(dir, name)?;
                let (maps, records) =
                    analyze_pair(&dump, &manifest, config, &policies).map_err(|e| pair_error(name, "analyze", e))?;
                Ok((records, config.export_maps.then_some(maps)))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut analyzed = 0;
    let mut exported = Vec::new();
    for ((name, dir), result) in pairs.iter().zip(results) {
        match result {
            Ok((r, maps)) => {
                analyzed += 1;
                records.extend(r);
                if let Some(maps) = maps {
                    exported.push((name.clone(), dir.clone(), maps));
                }
            }
            Err(e) => errors.push(e),
        }
    }

    let sweep = stats::threshold_sweep(&records, &policies, config.tail, config.effect_size);
    let summary_records: Vec<&SeparationRecord> =
        records.iter().filter(|r| r.policy().key() == policies[0].key()).collect();
    let content_summaries =
        stats::component_summaries(summary_records.iter().copied(), GroupBy::Content).expect("single policy");
    let style_summaries =
        stats::component_summaries(summary_records.iter().copied(), GroupBy::Style).expect("single policy");

    let report = RunReport {
        meta: ReportMeta::new(config, &policies),
        pairs_found: pairs.len(),
        pairs_analyzed: analyzed,
        records: records.len(),
        errors,
        mean_effect_size: stats::mean_effect_size(&sweep),
        sweep,
        content_summaries,
        style_summaries,
        outputs: Vec::new(),
    };
    let mut outcome = RunOutcome { report, records };
    if config.export_maps {
        outcome.report.outputs.extend(export_maps(config, &exported)?);
    }
    Ok(outcome)
}

fn export_maps(config: &RunConfig, exported: &[(String, PathBuf, PairMaps)]) -> Result<Vec<String>, ReportError> {
    let mut written = Vec::new();
    for (name, dir, maps) in exported {
        let out = config.output_dir.join("maps").join(name);
        std::fs::create_dir_all(&out)?;
        let background = overlay::load_image(dir.join("image.png")).ok();
        for (role, map) in [("content", &maps.content), ("style", &maps.style)] {
            daam::write_dmap_file(map, out.join(format!("{role}.dmap"))).map_err(std::io::Error::other)?;
            let bg = background
                .as_ref()
                .filter(|img| (img.width() as usize, img.height() as usize) == (map.width, map.height));
            overlay::save_overlay(bg, map, config.overlay_opacity, out.join(format!("{role}.png")))
                .map_err(std::io::Error::other)?;
            written.push(format!("maps/{name}/{role}.dmap"));
            written.push(format!("maps/{name}/{role}.png"));
        }
    }
    Ok(written)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> Result<(), ReportError> {
    std::fs::write(dir.join(name), bytes)?;
    outputs.push(name.to_string());
    Ok(())
}

/// Writes records, sweep, summaries and `report.json` into the output directory.
pub fn write_outputs(config: &RunConfig, outcome: &mut RunOutcome) -> Result<(), ReportError> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    let report = &mut outcome.report;
    let mut outputs = Vec::new();
    if config.formats.contains(&ReportFormat::Csv) {
        let mut buf = Vec::new();
        report::write_records_csv(&outcome.records, &mut buf)?;
        write_file(dir, "records.csv", &buf, &mut outputs)?;
        let mut buf = Vec::new();
        report::write_sweep_csv(&report.sweep, config.effect_size, &mut buf)?;
        write_file(dir, "sweep.csv", &buf, &mut outputs)?;
        let mut buf = Vec::new();
        report::write_summaries_csv(&report.content_summaries, &mut buf)?;
        write_file(dir, "summary_content.csv", &buf, &mut outputs)?;
        let mut buf = Vec::new();
        report::write_summaries_csv(&report.style_summaries, &mut buf)?;
        write_file(dir, "summary_style.csv", &buf, &mut outputs)?;
    }
    if config.formats.contains(&ReportFormat::Json) {
        let mut buf = Vec::new();
        report::write_records_jsonl(&outcome.records, &mut buf)?;
        write_file(dir, "records.jsonl", &buf, &mut outputs)?;
        write_file(dir, "sweep.json", &report::to_json_bytes(&report.sweep)?, &mut outputs)?;
    }
    outputs.push("report.json".into());
    outputs.extend(std::mem::take(&mut report.outputs));
    report.outputs = outputs;
    std::fs::write(dir.join("report.json"), report::to_json_bytes(&*report)?)?;
    Ok(())
}

/// Analyze and write everything.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let mut outcome = analyze(config)?;
    write_outputs(config, &mut outcome)?;
    Ok(outcome.report)
}

/// Sweep over the policies present in `records`.
pub fn sweep_records(records: &[SeparationRecord], tail: Tail, convention: EffectSizeConvention) -> Vec<SweepPoint> {
    stats::threshold_sweep(records, &report::policies_in(records), tail, convention)
}

/// Policies of one kind, for filtering loaded records.
pub fn policies_of_kind(records: &[SeparationRecord], kind: ThresholdKind) -> Vec<ThresholdPolicy> {
    report::policies_in(records).into_iter().filter(|p| p.kind == kind).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_fixed_point_four() {
        let p = RunConfig::default().policies().unwrap();
        assert_eq!(p, vec![ThresholdPolicy { kind: ThresholdKind::Fixed, value: 0.4 }]);
    }

    #[test]
    fn config_rejects_bad_grids() {
        let empty = RunConfig { fixed_thresholds: vec![], ..RunConfig::default() };
        assert!(matches!(empty.check(), Err(ConfigError::EmptyGrid)));
        let dup = RunConfig { fixed_thresholds: vec![0.4, 0.4], ..RunConfig::default() };
        assert!(matches!(dup.check(), Err(ConfigError::DuplicateThreshold(_))));
        let range = RunConfig { percentiles: vec![1.0], ..RunConfig::default() };
        assert!(matches!(range.check(), Err(ConfigError::Threshold(_))));
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"thresholds": [0.4]}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"percentiles": [0.5], "component_mode": "first-token"}"#).unwrap();
        assert_eq!(c.component_mode, ComponentMode::FirstToken);
        assert_eq!(c.policies().unwrap().len(), 2);
    }
}
