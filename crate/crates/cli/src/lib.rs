//! The `countforge` command line.
//!
//! Configuration is layered: a TOML file (`--config`) holding a serialized
//! [`RunConfig`], then `COUNTFORGE_*` environment variables, then flags.
//!
//! Exit codes: 0 success, 1 some records or images failed, 2 configuration
//! or usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use countforge_core::client::{CountPick, EndpointConfig, HttpClient, VisionModel};
use countforge_core::config::RunConfig;
use countforge_core::corpus::{self, CorpusSample};
use countforge_core::crco::{self, CrcoMode, Grouping};
use countforge_core::d3t::{self, D3tError};
use countforge_core::glce::{self, FileImage, Fusion, ImageSource, InferenceResult, Tier};
use countforge_core::image_ops::TileFormat;
use countforge_core::metrics::{self, TableFormat};
use countforge_core::mock::{generate_scene, scene_from_record, MockModel, MockServer, SceneRegistry};
use countforge_core::model::{self, AnnotationFormat, AnnotationSet, CountRange, ImageRecord, Split};
use countforge_core::{seeds, Exec};

#[derive(Debug, Parser)]
#[command(name = "countforge", version, about = "Counting-corpus synthesis, tiled inference and evaluation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "COUNTFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true, env = "COUNTFORGE_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true, env = "COUNTFORGE_JOBS")]
    pub jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plain count-QA corpus, one sample per image.
    GenBaseline(GenBaselineArgs),
    /// Binary-search dialogue corpus (or its single-round range variant).
    GenD3t(GenD3tArgs),
    /// Count-ranking corpus.
    GenCrco(GenCrcoArgs),
    /// Count images with a model, writing JSON-lines results.
    Infer(InferArgs),
    /// Score results against annotations.
    Eval(EvalArgs),
    /// Write an annotation file of synthetic scenes for the mock model.
    MockScenes(MockScenesArgs),
    /// Serve the mock model over HTTP until killed.
    ServeMock(ServeMockArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnnFormat {
    Native,
    Points,
}

impl From<AnnFormat> for AnnotationFormat {
    fn from(f: AnnFormat) -> Self {
        match f {
            AnnFormat::Native => AnnotationFormat::NativeJson,
            AnnFormat::Points => AnnotationFormat::PointsJson,
        }
    }
}

#[derive(Debug, Args)]
pub struct Input {
    /// Annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value_t = AnnFormat::Native)]
    pub annotation_format: AnnFormat,
}

#[derive(Debug, Args)]
pub struct GenBaselineArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum D3tMode {
    Binary,
    SingleRound,
}

#[derive(Debug, Args)]
pub struct GenD3tArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = D3tMode::Binary)]
    pub mode: D3tMode,
    /// Initial count range as `LO,HI`.
    #[arg(long, value_parser = parse_range)]
    pub range: Option<CountRange>,
    /// Stop once the range is narrower than this fraction of the count.
    #[arg(long)]
    pub delta_ratio: Option<f64>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    /// Start each category from its own count extrema.
    #[arg(long)]
    pub per_category_range: bool,
    /// Expand the initial range to cover out-of-range counts instead of skipping them.
    #[arg(long)]
    pub clamp: bool,
    /// Sub-range width for `--mode single-round`.
    #[arg(long)]
    pub delta: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CrcoModeArg {
    Stratified,
    Random,
    CrossCategory,
    SemiCross,
    Scrco,
}

impl From<CrcoModeArg> for CrcoMode {
    fn from(m: CrcoModeArg) -> Self {
        match m {
            CrcoModeArg::Stratified => CrcoMode::Stratified,
            CrcoModeArg::Random => CrcoMode::Random,
            CrcoModeArg::CrossCategory => CrcoMode::CrossCategory,
            CrcoModeArg::SemiCross => CrcoMode::SemiCross,
            CrcoModeArg::Scrco => CrcoMode::Scrco,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCrcoArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub out: PathBuf,
    /// Images per set.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<CrcoModeArg>,
    /// JSON `{group: [category, ...]}` table for semi-cross sampling.
    #[arg(long)]
    pub grouping_file: Option<PathBuf>,
    #[arg(long)]
    pub sets_per_category: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Mean,
    GlobalOnly,
    LocalOnly,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Mean => Fusion::Mean,
            FusionArg::GlobalOnly => Fusion::GlobalOnly,
            FusionArg::LocalOnly => Fusion::LocalOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PickArg {
    First,
    Last,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: Input,
    /// Results file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Use the in-process mock model over synthetic scenes.
    #[arg(long, conflicts_with = "mock_serve")]
    pub mock: bool,
    /// Serve the mock on a local port and query it over HTTP.
    #[arg(long)]
    pub mock_serve: bool,
    /// Directory relative image paths are resolved against (default: the annotation file's directory).
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    #[arg(long, env = "COUNTFORGE_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "COUNTFORGE_MODEL")]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, env = "COUNTFORGE_API_KEY_ENV")]
    pub api_key_env: Option<String>,
    #[arg(long, env = "COUNTFORGE_TIMEOUT")]
    pub timeout: Option<f64>,
    #[arg(long, env = "COUNTFORGE_MAX_RETRIES")]
    pub max_retries: Option<u32>,
    #[arg(long, env = "COUNTFORGE_CONCURRENCY")]
    pub concurrency: Option<usize>,
    /// Global counts at or above this are tiled.
    #[arg(long)]
    pub dense_threshold: Option<u64>,
    /// Tiles per side.
    #[arg(long)]
    pub grid: Option<u32>,
    /// Count-tiered grids as `BOUND:L,...`, e.g. `0:1,100:2,300:3`.
    #[arg(long, value_parser = parse_tiers)]
    pub adaptive_tiers: Option<Tiers>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Which integer of a reply is the count.
    #[arg(long, value_enum)]
    pub count_pick: Option<PickArg>,
}

#[derive(Debug, Clone)]
pub struct Tiers(pub Vec<Tier>);

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Csv,
    Json,
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Markdown => TableFormat::Markdown,
            FormatArg::Csv => TableFormat::Csv,
            FormatArg::Json => TableFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results file written by `infer`.
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub input: Input,
    /// Table format printed to stdout.
    #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
    pub format: FormatArg,
    /// JSON report file (both the default and the failure-excluding report).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 101)]
    pub min_objects: u64,
    #[arg(long, default_value_t = 400)]
    pub max_objects: u64,
    #[arg(long, default_value_t = 1000)]
    pub width: u32,
    #[arg(long, default_value_t = 1000)]
    pub height: u32,
    #[arg(long, default_value = "objects")]
    pub category: String,
    /// Store object centers in the file instead of regenerating them from the seed.
    #[arg(long)]
    pub with_points: bool,
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long, default_value = "127.0.0.1:8000")]
    pub addr: String,
}

fn parse_range(s: &str) -> Result<CountRange, String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let lo = a.trim().parse::<u64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<u64>().map_err(|e| e.to_string())?;
    CountRange::new(lo, hi).map_err(|e| e.to_string())
}

fn parse_tiers(s: &str) -> Result<Tiers, String> {
    s.split(',')
        .map(|t| {
            let (a, b) = t
                .split_once(':')
                .ok_or_else(|| format!("expected BOUND:L, got {t:?}"))?;
            Ok(Tier {
                min_count: a.trim().parse().map_err(|e| format!("{t:?}: {e}"))?,
                grid_l: b.trim().parse().map_err(|e| format!("{t:?}: {e}"))?,
            })
        })
        .collect::<Result<Vec<_>, String>>()
        .map(Tiers)
}

/// Error carrying an exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn partial(message: String) -> anyhow::Error {
    Exit { code: 1, message }.into()
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(2, |x| x.code);
            eprintln!("error: {e:#}");
            code
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    let jobs = cli.jobs;
    if jobs == Some(0) {
        bail!("--jobs must be at least 1");
    }
    let exec = if jobs == Some(1) { Exec::Sequential } else { Exec::Parallel };
    with_pool(jobs, || match &cli.command {
        Command::GenBaseline(a) => gen_baseline(&cfg, a, exec),
        Command::GenD3t(a) => {
            apply_d3t(&mut cfg, a);
            gen_d3t(&cfg, a, exec)
        }
        Command::GenCrco(a) => {
            apply_crco(&mut cfg, a);
            gen_crco(&cfg, a, exec)
        }
        Command::Infer(a) => {
            apply_infer(&mut cfg, a);
            infer(&cfg, a, exec)
        }
        Command::Eval(a) => eval(&cfg, a),
        Command::MockScenes(a) => mock_scenes(&cfg, a),
        Command::ServeMock(a) => serve_mock(&cfg, a),
    })
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) if n > 1 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("cannot build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_pool<R: Send>(_jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// File layer plus global flags.
pub fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.crco.seed = cfg.seed;
    Ok(cfg)
}

fn apply_d3t(cfg: &mut RunConfig, a: &GenD3tArgs) {
    if let Some(r) = a.range {
        cfg.d3t.initial_range = r;
        cfg.single_round.initial_range = r;
    }
    if let Some(x) = a.delta_ratio {
        cfg.d3t.delta_ratio = x;
    }
    if let Some(x) = a.min_delta {
        cfg.d3t.min_delta = x;
    }
    if let Some(x) = a.delta {
        cfg.single_round.interval = x;
    }
    cfg.d3t.per_category_range |= a.per_category_range;
    cfg.d3t.clamp |= a.clamp;
}

fn apply_crco(cfg: &mut RunConfig, a: &GenCrcoArgs) {
    if let Some(k) = a.k {
        cfg.crco.k = k;
    }
    if let Some(m) = a.mode {
        cfg.crco.mode = m.into();
    }
    if let Some(g) = &a.grouping_file {
        cfg.crco.grouping_file = Some(g.clone());
    }
    if let Some(n) = a.sets_per_category {
        cfg.crco.sets_per_category = n;
    }
}

fn apply_infer(cfg: &mut RunConfig, a: &InferArgs) {
    let e = &mut cfg.endpoint;
    if let Some(x) = &a.base_url {
        e.base_url = x.clone();
    }
    if let Some(x) = &a.model {
        e.model_name = x.clone();
    }
    if let Some(x) = &a.api_key_env {
        e.api_key_env_var = x.clone();
    }
    if let Some(x) = a.timeout {
        e.timeout_s = x;
    }
    if let Some(x) = a.max_retries {
        e.max_retries = x;
    }
    if let Some(x) = a.concurrency {
        e.concurrent_request_limit = x;
    }
    let g = &mut cfg.glce;
    if let Some(x) = a.dense_threshold {
        g.dense_threshold = x;
    }
    if let Some(x) = a.grid {
        g.grid_l = x;
    }
    if let Some(t) = &a.adaptive_tiers {
        g.adaptive_tiers = Some(t.0.clone());
    }
    if let Some(f) = a.fusion {
        g.fusion = f.into();
    }
    if let Some(p) = a.count_pick {
        g.count_pick = match p {
            PickArg::First => CountPick::First,
            PickArg::Last => CountPick::Last,
        };
    }
}

fn load(input: &Input) -> Result<AnnotationSet> {
    let set = model::load_annotations(&input.annotations, input.annotation_format.into())?;
    if set.records.is_empty() {
        log::warn!("{}: no annotation records", input.annotations.display());
    }
    Ok(set)
}

fn write_samples(path: &Path, samples: &[CorpusSample]) -> Result<()> {
    ensure_parent(path)?;
    corpus::write_corpus(path, samples)?;
    log::info!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn gen_baseline(cfg: &RunConfig, a: &GenBaselineArgs, exec: Exec) -> Result<()> {
    let set = load(&a.input)?;
    let fp = cfg.fingerprint();
    let samples = exec.map(&set.records, |r| corpus::from_transcript(&d3t::generate_baseline(r), &fp));
    write_samples(&a.out, &samples)
}

fn gen_d3t(cfg: &RunConfig, a: &GenD3tArgs, exec: Exec) -> Result<()> {
    match a.mode {
        D3tMode::Binary => cfg.d3t.validate()?,
        D3tMode::SingleRound if cfg.single_round.interval == 0 => bail!("--delta must be at least 1"),
        D3tMode::SingleRound => {}
    }
    let set = load(&a.input)?;
    let fp = cfg.fingerprint();
    let mut ranges: BTreeMap<&str, CountRange> = BTreeMap::new();
    if cfg.d3t.per_category_range && a.mode == D3tMode::Binary {
        for cat in set.categories() {
            ranges.insert(cat, model::category_count_extrema(&set, cat)?);
        }
    }
    let generated: Vec<Result<CorpusSample, D3tError>> = exec.map(&set.records, |r| {
        let t = match a.mode {
            D3tMode::Binary => match ranges.get(r.category.as_str()) {
                Some(range) => d3t::generate_d3t_with_range(r, *range, &cfg.d3t),
                None => d3t::generate_d3t(r, &cfg.d3t),
            },
            D3tMode::SingleRound => d3t::generate_single_round(r, &cfg.single_round),
        }?;
        Ok(corpus::from_transcript(&t, &fp))
    });
    let mut samples = Vec::with_capacity(generated.len());
    let mut skipped = 0;
    for g in generated {
        match g {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping record: {e}");
                skipped += 1;
            }
        }
    }
    write_samples(&a.out, &samples)?;
    if skipped > 0 {
        return Err(partial(format!("{skipped} record(s) skipped; see warnings")));
    }
    Ok(())
}

fn gen_crco(cfg: &RunConfig, a: &GenCrcoArgs, exec: Exec) -> Result<()> {
    cfg.crco.validate()?;
    let grouping = cfg.crco.grouping_file.as_deref().map(Grouping::load).transpose()?;
    let set = load(&a.input)?;
    let fp = cfg.fingerprint();
    let mode = mode_name(cfg.crco.mode);
    let jobs: Vec<(String, usize)> = set
        .categories()
        .into_iter()
        .flat_map(|c| (0..cfg.crco.sets_per_category).map(move |i| (c.to_string(), i)))
        .collect();
    let generated = exec.map(&jobs, |(cat, i)| {
        let mut rng = seeds::stream(cfg.seed, &format!("crco/{cat}"), *i as u64);
        crco::sample_set(&set, cat, &cfg.crco, grouping.as_ref(), &mut rng)
            .map(|s| corpus::from_ranking(&format!("crco:{cat}:{i}"), &s, mode, &fp))
            .map_err(|e| format!("category {cat:?} set {i}: {e}"))
    });
    let mut samples = Vec::with_capacity(generated.len());
    let mut skipped = 0;
    for g in generated {
        match g {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping {e}");
                skipped += 1;
            }
        }
    }
    write_samples(&a.out, &samples)?;
    if skipped > 0 {
        return Err(partial(format!("{skipped} ranking set(s) skipped; see warnings")));
    }
    Ok(())
}

fn mode_name(m: CrcoMode) -> &'static str {
    match m {
        CrcoMode::Stratified => "stratified",
        CrcoMode::Random => "random",
        CrcoMode::CrossCategory => "cross_category",
        CrcoMode::SemiCross => "semi_cross",
        CrcoMode::Scrco => "scrco",
    }
}

fn registry_for(cfg: &RunConfig, set: &AnnotationSet) -> SceneRegistry {
    set.records
        .iter()
        .map(|r| scene_from_record(r, cfg.mock.object_radius, cfg.seed))
        .collect()
}

fn infer(cfg: &RunConfig, a: &InferArgs, exec: Exec) -> Result<()> {
    cfg.glce.validate()?;
    let set = load(&a.input)?;
    let fp = cfg.fingerprint();
    let results = if a.mock || a.mock_serve {
        let model = MockModel::new(registry_for(cfg, &set), cfg.mock.profile.clone());
        let source = |r: &ImageRecord| {
            Ok(Box::new(model.registry.image(&r.image_id).expect("scene registered for every record")) as Box<dyn ImageSource>)
        };
        if a.mock_serve {
            let server = MockServer::start(model.clone(), "127.0.0.1:0").context("starting mock server")?;
            let client = HttpClient::new(EndpointConfig {
                base_url: server.base_url(),
                ..cfg.endpoint.clone()
            })?;
            glce::run_benchmark(&set, &client, &cfg.glce, source, exec)?
        } else {
            glce::run_benchmark(&set, &model, &cfg.glce, source, exec)?
        }
    } else {
        let client: Arc<dyn VisionModel> = Arc::new(HttpClient::new(cfg.endpoint.clone())?);
        let root = match &a.images_root {
            Some(r) => r.clone(),
            None => a.input.annotations.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let format = cfg.glce.tile_format;
        let source = |r: &ImageRecord| open_image(&root, r, format);
        glce::run_benchmark(&set, client.as_ref(), &cfg.glce, source, exec)?
    };
    ensure_parent(&a.out)?;
    corpus::write_results(&a.out, &results, &fp)?;
    summarize(&results)
}

fn open_image(root: &Path, r: &ImageRecord, format: TileFormat) -> Result<Box<dyn ImageSource>, countforge_core::image_ops::ImageError> {
    let path = Path::new(&r.image_path);
    let path = if path.is_absolute() { path.to_path_buf() } else { root.join(path) };
    Ok(Box::new(FileImage::open(&path, format)?))
}

fn summarize(results: &[InferenceResult]) -> Result<()> {
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    let flagged = results.iter().filter(|r| r.parse_failures > 0).count();
    let tiled = results.iter().filter(|r| r.used_glce).count();
    eprintln!(
        "{} images: {} tiled, {} with parse failures, {} failed",
        results.len(),
        tiled,
        flagged,
        failed
    );
    if failed > 0 {
        let first = results.iter().find_map(|r| r.error.as_deref()).unwrap_or_default();
        return Err(partial(format!("{failed} image(s) failed, first: {first}")));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let set = load(&a.input)?;
    let (results, fp) = corpus::read_results(&a.results)?;
    let report = metrics::evaluate(&results, &set, &cfg.banding, &fp)?;
    let excluding = match metrics::evaluate_excluding_failures(&results, &set, &cfg.banding, &fp) {
        Ok(r) => Some(r),
        Err(metrics::EvalError::EmptyResults) => None,
        Err(e) => return Err(e.into()),
    };
    print!("{}", metrics::render_table(&report, a.format.into()));
    if report.parse_failure_count > 0 || report.failed_images > 0 {
        eprintln!(
            "{} parse failure(s), {} failed image(s) included as prediction 0",
            report.parse_failure_count, report.failed_images
        );
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let doc = serde_json::json!({
            "tool_version": countforge_core::TOOL_VERSION,
            "report": report,
            "excluding_failures": excluding,
        });
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn mock_scenes(cfg: &RunConfig, a: &MockScenesArgs) -> Result<()> {
    if a.min_objects > a.max_objects {
        bail!("--min-objects exceeds --max-objects");
    }
    if a.width == 0 || a.height == 0 {
        bail!("scene dimensions must be positive");
    }
    let mut rng = seeds::stream(cfg.seed, "mock-scenes", 0);
    let records = (0..a.count)
        .map(|i| {
            let id = format!("scene{i:05}");
            let count = rng.random_range(a.min_objects..=a.max_objects);
            let points = a.with_points.then(|| {
                let mut srng = seeds::stream(cfg.seed, &id, 0);
                generate_scene(id.clone(), a.category.clone(), count, a.width, a.height, cfg.mock.object_radius, &mut srng)
                    .objects
                    .iter()
                    .map(|o| [o.cx, o.cy])
                    .collect()
            });
            ImageRecord {
                image_path: format!("{id}.png"),
                image_id: id,
                category: a.category.clone(),
                count,
                points,
                width: a.width,
                height: a.height,
            }
        })
        .collect();
    let set = AnnotationSet::new("mock_scenes", Split::Test, records)?;
    ensure_parent(&a.out)?;
    let mut text = set.to_native_json();
    text.push('\n');
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn serve_mock(cfg: &RunConfig, a: &ServeMockArgs) -> Result<()> {
    let set = load(&a.input)?;
    let model = MockModel::new(registry_for(cfg, &set), cfg.mock.profile.clone());
    let server = MockServer::start(model, &a.addr).map_err(|e| anyhow!("binding {}: {e}", a.addr))?;
    eprintln!("serving {} scenes at {}", set.records.len(), server.base_url());
    server.join();
    Ok(())
}
