use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csep_core::corpus::{self, RenderOptions};
use csep_core::daam::{self, UpsampleSpec};
use csep_core::masks::{self, PercentileMethod, ThresholdPolicy};
use csep_core::pipeline::{self, ComponentMode, RunConfig};
use csep_core::report::{self, ReportFormat};
use csep_core::stats::{self, EffectSizeConvention, GroupBy, Tail};
use csep_core::synth::{self, SyntheticSceneSpec};
use csep_core::{dump, overlay};

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "csep", version, about = "Content/style separation analysis over cross-attention dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prompt corpus utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Check (manifest, dump) pairs for consistency.
    Validate(ValidateArgs),
    /// Run the full analysis over a directory of pairs.
    Analyze(AnalyzeArgs),
    /// Threshold sweep over an existing records file.
    Sweep(SweepArgs),
    /// Per-content or per-style Δ summaries from a records file.
    Summarize(SummarizeArgs),
    /// Render a heatmap overlay PNG.
    Overlay(OverlayArgs),
    /// Write synthetic pairs with known metrics.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Render the full content x style x template prompt grid.
    Gen(CorpusGenArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Content label file, one per line; defaults to the bundled 80 labels.
    #[arg(long)]
    contents: Option<PathBuf>,
    /// Style file with `label<TAB>artist|movement` lines; defaults to the bundled 50.
    #[arg(long)]
    styles: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    templates: Vec<u8>,
    /// Output directory; receives `prompts.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Use "an" before vowel-initial labels.
    #[arg(long)]
    fix_articles: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Pair directory, or a directory of pair directories.
    input: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Fixed thresholds, e.g. `0.3,0.4`.
    #[arg(long, value_delimiter = ',')]
    fixed: Option<Vec<f64>>,
    /// Percentile thresholds in (0, 1).
    #[arg(long, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    /// Both decile grids (fixed and percentile 0.1..0.9).
    #[arg(long, conflicts_with_all = ["fixed", "percentiles"])]
    full_grid: bool,
    #[arg(long, value_enum)]
    component_mode: Option<ComponentModeArg>,
    #[arg(long, value_enum)]
    percentile_method: Option<PercentileMethodArg>,
    #[arg(long, value_enum)]
    effect_size: Option<EffectSizeArg>,
    #[arg(long, value_enum)]
    tail: Option<TailArg>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    formats: Option<Vec<FormatArg>>,
    /// Cubic convolution coefficient.
    #[arg(long, allow_hyphen_values = true)]
    cubic: Option<f64>,
    /// Keep negative interpolation overshoot instead of clamping it.
    #[arg(long)]
    no_clamp: bool,
    /// Write component maps and overlays under `maps/`.
    #[arg(long)]
    export_maps: bool,
    #[arg(long)]
    opacity: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// `records.jsonl` or `records.csv`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "two-sided")]
    tail: TailArg,
    #[arg(long, value_enum, default_value = "pooled-sd")]
    effect_size: EffectSizeArg,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "content")]
    group_by: GroupByArg,
    /// Policy whose records are summarized, e.g. `fixed:0.4`.
    #[arg(long, default_value = "fixed:0.4")]
    policy: ThresholdPolicy,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// A `.dmap` map file.
    #[arg(long, required_unless_present = "pair", conflicts_with = "pair")]
    map: Option<PathBuf>,
    /// Pair directory; the map is computed for `--component`.
    #[arg(long)]
    pair: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "content")]
    component: ComponentArg,
    /// Background PNG; neutral gray when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    opacity: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "separated")]
    preset: PresetArg,
    /// Scene spec JSON; overrides `--preset`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of pairs (only `separated` varies between pairs).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    width: u32,
    #[arg(long, default_value_t = 32)]
    height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentModeArg {
    Fused,
    FirstToken,
}

#[derive(Clone, Copy, ValueEnum)]
enum PercentileMethodArg {
    Linear,
    LinearCapped,
}

#[derive(Clone, Copy, ValueEnum)]
enum EffectSizeArg {
    PooledSd,
    DifferenceSd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TailArg {
    TwoSided,
    Greater,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupByArg {
    Content,
    Style,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentArg {
    Content,
    Style,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Disjoint,
    Entangled,
    HalfOverlap,
    Separated,
}

impl From<TailArg> for Tail {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::TwoSided => Tail::TwoSided,
            TailArg::Greater => Tail::Greater,
        }
    }
}

impl From<EffectSizeArg> for EffectSizeConvention {
    fn from(e: EffectSizeArg) -> Self {
        match e {
            EffectSizeArg::PooledSd => EffectSizeConvention::PooledSd,
            EffectSizeArg::DifferenceSd => EffectSizeConvention::DifferenceSd,
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: message.to_string() }
    }

    fn run(message: impl ToString) -> Self {
        Self { code: EXIT_PARTIAL, message: message.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus { command: CorpusCommand::Gen(args) } => corpus_gen(args),
        Command::Validate(args) => validate(args),
        Command::Analyze(args) => analyze(args),
        Command::Sweep(args) => sweep(args),
        Command::Summarize(args) => summarize(args),
        Command::Overlay(args) => render_overlay(args),
        Command::Synth(args) => synthesize(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::run(format!("{}: {e}", p.display())))?))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn corpus_gen(args: CorpusGenArgs) -> CmdResult {
    let contents = match &args.contents {
        Some(p) => corpus::load_contents(p).map_err(Failure::config)?,
        None => corpus::bundled_contents(),
    };
    let styles = match &args.styles {
        Some(p) => corpus::load_styles(p).map_err(Failure::config)?,
        None => corpus::bundled_styles(),
    };
    let options = RenderOptions { fix_articles: args.fix_articles };
    let specs = corpus::generate_corpus(&contents, &styles, &args.templates, options).map_err(Failure::config)?;
    std::fs::create_dir_all(&args.out).map_err(Failure::run)?;
    let path = args.out.join("prompts.jsonl");
    let file = File::create(&path).map_err(Failure::run)?;
    corpus::write_index(&specs, BufWriter::new(file)).map_err(Failure::run)?;
    println!(
        "{} prompts ({} contents x {} styles x {} templates) -> {}",
        specs.len(),
        contents.len(),
        styles.len(),
        args.templates.len(),
        path.display()
    );
    Ok(0)
}

fn validate(args: ValidateArgs) -> CmdResult {
    let pairs = pipeline::discover_pairs(&args.input).map_err(Failure::run)?;
    let mut failed = 0;
    for (name, dir) in &pairs {
        match pipeline::load_pair(dir, name) {
            Ok((d, m)) => println!("ok    {name}  {} tokens, {} records", m.tokens.len(), d.records.len()),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}  [{}] {}", e.stage, e.message);
            }
        }
    }
    println!("{}/{} pairs valid", pairs.len() - failed, pairs.len());
    Ok(if failed == 0 { 0 } else { EXIT_PARTIAL })
}

fn build_config(args: &AnalyzeArgs) -> Result<RunConfig, Failure> {
    let mut config = match &args.config {
        Some(p) => RunConfig::from_json_file(p).map_err(Failure::config)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.input {
        config.input_dir = v.clone();
    }
    if let Some(v) = &args.output {
        config.output_dir = v.clone();
    }
    if args.full_grid {
        config.fixed_thresholds = masks::decile_grid();
        config.percentiles = masks::decile_grid();
    }
    if let Some(v) = &args.fixed {
        config.fixed_thresholds = v.clone();
    }
    if let Some(v) = &args.percentiles {
        config.percentiles = v.clone();
    }
    if let Some(v) = args.component_mode {
        config.component_mode = match v {
            ComponentModeArg::Fused => ComponentMode::Fused,
            ComponentModeArg::FirstToken => ComponentMode::FirstToken,
        };
    }
    if let Some(v) = args.percentile_method {
        config.percentile_method = match v {
            PercentileMethodArg::Linear => PercentileMethod::Linear,
            PercentileMethodArg::LinearCapped => PercentileMethod::LinearCapped,
        };
    }
    if let Some(v) = args.effect_size {
        config.effect_size = v.into();
    }
    if let Some(v) = args.tail {
        config.tail = v.into();
    }
    if let Some(v) = args.parallelism {
        config.parallelism = v;
    }
    if let Some(v) = &args.formats {
        config.formats = v
            .iter()
            .map(|f| match f {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            })
            .collect();
    }
    if let Some(a) = args.cubic {
        config.upsample.cubic_coefficient = a;
    }
    if args.no_clamp {
        config.upsample.clamp_negative = false;
    }
    if args.export_maps {
        config.export_maps = true;
    }
    if let Some(v) = args.opacity {
        config.overlay_opacity = v;
    }
    config.check().map_err(Failure::config)?;
    Ok(config)
}

fn analyze(args: AnalyzeArgs) -> CmdResult {
    let config = build_config(&args)?;
    let report = pipeline::run_pipeline(&config).map_err(|e| match e {
        pipeline::PipelineError::Config(c) => Failure::config(c),
        other => Failure::run(other),
    })?;
    for e in &report.errors {
        eprintln!("skipped {} [{}]: {}", e.pair, e.stage, e.message);
    }
    println!(
        "{}/{} pairs analyzed, {} records -> {}",
        report.pairs_analyzed,
        report.pairs_found,
        report.records,
        config.output_dir.display()
    );
    for p in &report.sweep {
        println!(
            "{}:{}  mean IoU_CS {}  mean mIoU_B {}  p {}",
            p.policy_kind.as_str(),
            p.policy_value,
            fmt_opt(p.mean_iou_cs),
            fmt_opt(p.mean_miou_b),
            fmt_opt(p.p_value)
        );
    }
    Ok(report.exit_code() as u8)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn load_records(path: &Path) -> Result<Vec<masks::SeparationRecord>, Failure> {
    report::read_records_file(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn sweep(args: SweepArgs) -> CmdResult {
    let records = load_records(&args.records)?;
    let convention = args.effect_size.into();
    let points = pipeline::sweep_records(&records, args.tail.into(), convention);
    let mut out = open_out(args.out.as_deref())?;
    match args.format {
        FormatArg::Csv => report::write_sweep_csv(&points, convention, &mut out).map_err(Failure::run)?,
        FormatArg::Json => {
            out.write_all(&report::to_json_bytes(&points).map_err(Failure::run)?).map_err(Failure::run)?
        }
    }
    out.flush().map_err(Failure::run)?;
    Ok(0)
}

fn summarize(args: SummarizeArgs) -> CmdResult {
    let records = load_records(&args.records)?;
    let group_by = match args.group_by {
        GroupByArg::Content => GroupBy::Content,
        GroupByArg::Style => GroupBy::Style,
    };
    let selected = records.iter().filter(|r| r.policy().key() == args.policy.key());
    let summaries = stats::component_summaries(selected, group_by).map_err(Failure::run)?;
    let mut out = open_out(args.out.as_deref())?;
    match args.format {
        FormatArg::Csv => report::write_summaries_csv(&summaries, &mut out).map_err(Failure::run)?,
        FormatArg::Json => {
            out.write_all(&report::to_json_bytes(&summaries).map_err(Failure::run)?).map_err(Failure::run)?
        }
    }
    out.flush().map_err(Failure::run)?;
    Ok(0)
}

fn render_overlay(args: OverlayArgs) -> CmdResult {
    let map = match (&args.map, &args.pair) {
        (Some(p), _) => daam::read_dmap_file(p).map_err(Failure::config)?,
        (None, Some(dir)) => {
            let name = dir.display().to_string();
            let (d, m) = pipeline::load_pair(dir, &name).map_err(|e| Failure::run(e.message))?;
            let span = match args.component {
                ComponentArg::Content => m.content_span,
                ComponentArg::Style => m.style_span,
            };
            daam::fuse_span(&d, &m.tokens, span, &UpsampleSpec::default()).map_err(Failure::run)?
        }
        (None, None) => return Err(Failure::config("one of --map or --pair is required")),
    };
    let image = match &args.image {
        Some(p) => Some(overlay::load_image(p).map_err(Failure::config)?),
        None => None,
    };
    overlay::save_overlay(image.as_ref(), &map, args.opacity, &args.out).map_err(Failure::config)?;
    println!("{}x{} overlay -> {}", map.width, map.height, args.out.display());
    Ok(0)
}

fn synthesize(args: SynthArgs) -> CmdResult {
    let specs: Vec<SyntheticSceneSpec> = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Failure::config)?;
            vec![serde_json::from_str(&text).map_err(Failure::config)?]
        }
        None => match args.preset {
            PresetArg::Separated => synth::separated_corpus(args.count, args.width, args.height, args.seed),
            preset => {
                let one = match preset {
                    PresetArg::Disjoint => SyntheticSceneSpec::disjoint(args.width, args.height),
                    PresetArg::Entangled => SyntheticSceneSpec::entangled(args.width, args.height),
                    _ => SyntheticSceneSpec::half_overlap(args.width, args.height),
                };
                vec![one; args.count]
            }
        },
    };
    let pairs = specs
        .into_iter()
        .map(|s| synth::synth_fixture(&SyntheticSceneSpec { noise: s.noise.max(args.noise), ..s }))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::config)?;
    if pairs.len() == 1 && args.count == 1 {
        synth::write_pair(&pairs[0], &args.out).map_err(Failure::run)?;
    } else {
        synth::write_corpus(&pairs, &args.out).map_err(Failure::run)?;
    }
    let checked = pairs.iter().filter(|p| dump::validate_pair(&p.dump, &p.manifest).is_ok()).count();
    println!("{} synthetic pairs ({checked} valid) -> {}", pairs.len(), args.out.display());
    Ok(0)
}
