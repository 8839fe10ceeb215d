//! The `forge` command line.
//!
//! Configuration is layered: built-in defaults, then an optional JSON file
//! (`--config`), then flags. The effective configuration is logged at start
//! and recorded in every checkpoint and report the command writes.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use forge_core::eval::{
    emit_report, run_ablation, run_length_experiment, run_ssim_experiment, AblationConfig, ExperimentReport,
    LengthExperimentConfig,
};
use forge_core::gan::{load_pairs, train_gan_pairs, GanConfig, GanModel, TrainOptions};
use forge_core::nn::ModelCheckpoint;
use forge_core::ops::{self, MorphOp, Threshold};
use forge_core::pipeline::{solve, Denoiser, SolverBundle, DEFAULT_MAX_ATTEMPTS};
use forge_core::recognize::{
    manifest_char_samples, preprocess, train_char_cnn, train_image_level_baseline, CharClassifier, CnnConfig,
    PatchSource,
};
use forge_core::segment::{segment, SegMethod, SegmentationConfig};
use forge_core::synth::{build_dataset, Charset, DatasetManifest, NoiseCategory, NoiseSpec, Split, StyleSpec};
use forge_core::CaptchaImage;
use forge_gate::{crawl_gate, serve_gate, CrawlConfig, GateConfig, Schedule};

/// Every tunable the commands read, before flags are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Default destination for reports.
    pub out_root: PathBuf,
    pub style: StyleSpec,
    pub noise: NoiseSpec,
    pub gan: GanConfig,
    pub cnn: CnnConfig,
    pub segmentation: SegmentationConfig,
    pub max_attempts: usize,
    pub lengths: LengthExperimentConfig,
    pub ablation: AblationConfig,
    pub gate: GateConfig,
    pub crawl: CrawlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_root: PathBuf::from("."),
            style: StyleSpec::default(),
            noise: NoiseSpec::none(),
            gan: GanConfig::default(),
            cnn: CnnConfig::default(),
            segmentation: SegmentationConfig::default(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            lengths: LengthExperimentConfig::default(),
            ablation: AblationConfig::default(),
            gate: GateConfig::default(),
            crawl: CrawlConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the JSON file at `path`, if any. Objects merge
    /// key by key, so a file may set a single nested field.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !file.is_object() {
                return Err(Usage(format!("config {} must be a JSON object", path.display())).into());
            }
            merge(&mut value, file);
        }
        serde_json::from_value(value).context("config does not match the expected shape")
    }

    fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A command line that parsed but cannot be acted on.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Text CAPTCHA synthesis, denoising, segmentation, recognition and evaluation")]
pub struct Cli {
    /// JSON config layered over the defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more detail (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labeled dataset of noisy/clean pairs with a manifest.
    Synth(SynthArgs),
    /// Apply a single image operation, for debugging.
    Imgop(ImgopArgs),
    /// Train the denoising GAN on a dataset.
    TrainGan(TrainGanArgs),
    /// Train the character recognizer (or the image-level baseline).
    TrainCnn(TrainCnnArgs),
    /// Segment one image into character patches.
    Segment(SegmentArgs),
    /// Solve one captcha and print ranked answers.
    Solve(SolveArgs),
    /// Run an experiment and write its report.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the offline gated site or crawl it.
    #[command(subcommand)]
    Gate(GateCommand),
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("{t:?} is not a length"));
    match s.split_once(':') {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("{s:?} is not WIDTHxHEIGHT"))?;
    let p = |t: &str| t.parse::<usize>().map_err(|_| format!("{s:?} is not WIDTHxHEIGHT"));
    Ok((p(w)?, p(h)?))
}

fn parse_noise(s: &str) -> Result<NoiseCategory, String> {
    s.parse().map_err(|e: forge_core::Error| e.to_string())
}

fn parse_charset(s: &str) -> Result<Charset, String> {
    Charset::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Label length or inclusive range, e.g. `4` or `4:7`.
    #[arg(long, value_parser = parse_range)]
    pub length: Option<(usize, usize)>,
    #[arg(long)]
    pub count: usize,
    /// Noise category, e.g. `dots`, `dense-curves`, `none`.
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<NoiseCategory>,
    /// `digits`, `alnum`, `alnum62` or a literal symbol list.
    #[arg(long, value_parser = parse_charset)]
    pub charset: Option<Charset>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of samples in the training split.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImgOp {
    Grayscale,
    Smooth,
    Normalize,
    Binarize,
    Invert,
    Erode,
    Dilate,
    Ssim,
}

#[derive(Debug, Args)]
pub struct ImgopArgs {
    #[arg(value_enum)]
    pub op: ImgOp,
    #[arg(long)]
    pub img: PathBuf,
    /// Output PNG; required for every operation except `ssim`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Second image for `ssim`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub kernel: usize,
    /// `otsu` or a fixed level in [0, 1].
    #[arg(long, default_value = "otsu")]
    pub threshold: String,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    /// Dataset directory (or manifest file) with clean pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train on random WIDTHxHEIGHT crops.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Clean,
    Denoised,
    Preprocessed,
}

#[derive(Debug, Args)]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Which rendition character patches are cut from.
    #[arg(long, value_enum, default_value = "clean")]
    pub source: SourceArg,
    /// GAN checkpoint, needed for `--source denoised`.
    #[arg(long)]
    pub gan: Option<PathBuf>,
    /// Train the whole-image baseline for this fixed length instead.
    #[arg(long)]
    pub image_level: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Full,
    Interval,
    Tracing,
}

impl From<MethodArg> for SegMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Full => SegMethod::Full,
            MethodArg::Interval => SegMethod::IntervalOnly,
            MethodArg::Tracing => SegMethod::TracingOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub img: PathBuf,
    /// Denoise with this GAN first; otherwise the image is only preprocessed.
    #[arg(long)]
    pub gan: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Fixed character count instead of the estimate.
    #[arg(long)]
    pub k: Option<usize>,
    /// Directory for the patch PNGs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub img: PathBuf,
    /// GAN checkpoint; without it the image is only preprocessed.
    #[arg(long)]
    pub gan: Option<PathBuf>,
    #[arg(long)]
    pub cnn: PathBuf,
    #[arg(long)]
    pub attempts: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// SSIM against the clean image before and after denoising.
    Ssim(SsimArgs),
    /// Success rate per captcha length for each method.
    Lengths(LengthsArgs),
    /// Success rate with each pipeline component removed.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct SsimArgs {
    #[arg(long)]
    pub gan: PathBuf,
    /// Images per noise category.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Comma-separated categories; all six noisy ones by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_noise)]
    pub categories: Vec<NoiseCategory>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LengthsArgs {
    #[arg(long)]
    pub gan: PathBuf,
    /// Comma-separated, e.g. `4,5,6,7`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub cnn_epochs: Option<usize>,
    #[arg(long)]
    pub image_epochs: Option<usize>,
    /// Also score a mixed-length test set.
    #[arg(long)]
    pub mixed: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub gan: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub cnn_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum GateCommand {
    /// Serve the gated site until interrupted.
    Serve(ServeArgs),
    /// Crawl a running gate with a solver bundle.
    Crawl(CrawlArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub pages: Option<usize>,
    /// Mean requests per session cycle.
    #[arg(long)]
    pub period: Option<usize>,
    /// Use fixed-length cycles instead of geometric ones.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<NoiseCategory>,
    #[arg(long, value_parser = parse_range)]
    pub length: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_charset)]
    pub charset: Option<Charset>,
    #[arg(long)]
    pub host: Option<String>,
    /// 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CrawlArgs {
    #[arg(long)]
    pub url: String,
    #[arg(long)]
    pub gan: Option<PathBuf>,
    #[arg(long)]
    pub cnn: PathBuf,
    #[arg(long)]
    pub pages: Option<usize>,
    /// Charset the gate uses; must match the recognizer.
    #[arg(long, value_parser = parse_charset)]
    pub charset: Option<Charset>,
    #[arg(long)]
    pub attempts: Option<usize>,
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 1 on a domain error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a),
        Command::Imgop(a) => imgop(a),
        Command::TrainGan(a) => train_gan_cmd(&mut cfg, a),
        Command::TrainCnn(a) => train_cnn_cmd(&mut cfg, a),
        Command::Segment(a) => segment_cmd(&mut cfg, a),
        Command::Solve(a) => solve_cmd(&mut cfg, a),
        Command::Eval(EvalCommand::Ssim(a)) => eval_ssim(&mut cfg, a),
        Command::Eval(EvalCommand::Lengths(a)) => eval_lengths(&mut cfg, a),
        Command::Eval(EvalCommand::Ablation(a)) => eval_ablation(&mut cfg, a),
        Command::Gate(GateCommand::Serve(a)) => gate_serve(&mut cfg, a),
        Command::Gate(GateCommand::Crawl(a)) => gate_crawl(&mut cfg, a),
    }
}

fn log_config(cfg: &RunConfig) {
    log::debug!("effective config: {}", cfg.to_json());
}

fn load_ckpt(path: &Path) -> anyhow::Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_img(path: &Path) -> anyhow::Result<CaptchaImage> {
    CaptchaImage::load_png(path).with_context(|| format!("loading image {}", path.display()))
}

fn print_json(v: &impl Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn synth(cfg: &mut RunConfig, a: SynthArgs) -> anyhow::Result<()> {
    if let Some(len) = a.length {
        cfg.style.length_range = len;
    }
    if let Some(cs) = a.charset {
        cfg.style.charset = cs;
    }
    if let Some(n) = a.noise {
        cfg.noise = NoiseSpec::category(n);
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let manifest = build_dataset(&cfg.style, &cfg.noise, a.count, a.split, &a.out, cfg.seed, a.overwrite)?;
    println!(
        "wrote {} samples to {} (content hash {})",
        manifest.entries.len(),
        a.out.display(),
        manifest.content_hash()?
    );
    Ok(())
}

fn imgop(a: ImgopArgs) -> anyhow::Result<()> {
    let img = load_img(&a.img)?;
    if a.op == ImgOp::Ssim {
        let Some(reference) = &a.reference else {
            return usage("ssim needs --reference");
        };
        let other = load_img(reference)?;
        println!("{:.6}", ops::ssim(&ops::grayscale(&img), &ops::grayscale(&other))?);
        return Ok(());
    }
    let Some(out) = &a.out else {
        return usage(format!("{:?} needs --out", a.op));
    };
    let threshold = match a.threshold.as_str() {
        "otsu" => Threshold::Otsu,
        t => Threshold::Fixed(t.parse().map_err(|_| Usage(format!("bad threshold {t:?}")))?),
    };
    let gray = ops::grayscale(&img);
    let result = match a.op {
        ImgOp::Grayscale => gray,
        ImgOp::Smooth => ops::gaussian_smooth(&gray, a.sigma, a.kernel)?,
        ImgOp::Normalize => ops::normalize(&gray),
        ImgOp::Binarize => ops::binarize(&gray, threshold)?,
        ImgOp::Invert => ops::invert(&gray),
        ImgOp::Erode => ops::morphology(&gray, MorphOp::Erode, a.kernel)?,
        ImgOp::Dilate => ops::morphology(&gray, MorphOp::Dilate, a.kernel)?,
        ImgOp::Ssim => unreachable!(),
    };
    result.save_png(out)?;
    Ok(())
}

fn train_gan_cmd(cfg: &mut RunConfig, a: TrainGanArgs) -> anyhow::Result<()> {
    let g = &mut cfg.gan;
    g.epochs = a.epochs.unwrap_or(g.epochs);
    g.learning_rate = a.lr.unwrap_or(g.learning_rate);
    g.batch_size = a.batch.unwrap_or(g.batch_size);
    g.seed = a.seed.unwrap_or(cfg.seed);
    if a.crop.is_some() {
        g.crop = a.crop;
    }
    log_config(cfg);
    let manifest = DatasetManifest::load(&a.data)?;
    let pairs = load_pairs(&manifest, Split::Train)?;
    log::info!("training GAN on {} pairs for {} epochs", pairs.len(), cfg.gan.epochs);
    let opts = TrainOptions {
        out: Some(a.out.clone()),
        run_config: Some(cfg.to_json()),
        ..Default::default()
    };
    let ck = train_gan_pairs(&pairs, &cfg.gan, opts)?;
    println!("saved {} ({} epochs) to {}", ck.architecture.kind(), ck.training_meta.epochs_completed, a.out.display());
    Ok(())
}

fn train_cnn_cmd(cfg: &mut RunConfig, a: TrainCnnArgs) -> anyhow::Result<()> {
    let c = &mut cfg.cnn;
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.learning_rate = a.lr.unwrap_or(c.learning_rate);
    c.batch_size = a.batch.unwrap_or(c.batch_size);
    c.micro_batch = c.micro_batch.min(c.batch_size);
    c.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let manifest = DatasetManifest::load(&a.data)?;
    let mut ck = if let Some(len) = a.image_level {
        let pairs = |split| -> anyhow::Result<Vec<(CaptchaImage, String)>> {
            manifest
                .split(split)
                .map(|e| Ok((manifest.load_noisy(e)?, e.label.clone())))
                .collect()
        };
        let (train, test) = (pairs(Split::Train)?, pairs(Split::Test)?);
        log::info!("training image-level baseline on {} images", train.len());
        train_image_level_baseline(&train, &test, len, &manifest.charset, cfg.lengths.image_net_size, &cfg.cnn)?
    } else {
        let gan = match (a.source, &a.gan) {
            (SourceArg::Denoised, None) => return usage("--source denoised needs --gan"),
            (SourceArg::Denoised, Some(p)) => Some(GanModel::from_checkpoint(&load_ckpt(p)?)?),
            _ => None,
        };
        let source = match (a.source, &gan) {
            (SourceArg::Clean, _) => PatchSource::Clean,
            (SourceArg::Denoised, Some(g)) => PatchSource::Denoised(g),
            _ => PatchSource::Preprocessed,
        };
        let seg = SegmentationConfig {
            patch_size: cfg.segmentation.patch_size,
            ..cfg.segmentation.clone()
        };
        let train = manifest_char_samples(&manifest, Split::Train, source, &seg)?;
        let val = manifest_char_samples(&manifest, Split::Test, source, &seg)?;
        log::info!("training character CNN on {} patches", train.len());
        train_char_cnn(&train, &val, &manifest.charset, &cfg.cnn, None)?
    };
    let meta = std::mem::take(&mut ck.training_meta.config);
    ck.training_meta.config = serde_json::json!({ "cnn": meta, "run": cfg.to_json() });
    ck.save(&a.out)?;
    println!(
        "saved {} ({} epochs, final {:?}) to {}",
        ck.architecture.kind(),
        ck.training_meta.epochs_completed,
        ck.training_meta.final_losses,
        a.out.display()
    );
    Ok(())
}

fn denoiser(gan: Option<&PathBuf>) -> anyhow::Result<Denoiser> {
    Ok(match gan {
        Some(p) => Denoiser::Gan(GanModel::from_checkpoint(&load_ckpt(p)?)?),
        None => Denoiser::Preprocess,
    })
}

#[derive(Serialize)]
struct RegionOut {
    index: usize,
    left: usize,
    top: usize,
    width: usize,
    height: usize,
    patch: Option<String>,
}

fn segment_cmd(cfg: &mut RunConfig, a: SegmentArgs) -> anyhow::Result<()> {
    if let Some(m) = a.method {
        cfg.segmentation.method = m.into();
    }
    if a.k.is_some() {
        cfg.segmentation.k = a.k;
    }
    log_config(cfg);
    let img = load_img(&a.img)?;
    let prepared = match denoiser(a.gan.as_ref())? {
        Denoiser::Gan(g) => g.denoise(&img)?,
        Denoiser::Preprocess => preprocess(&img),
    };
    let segments = segment(&prepared, &cfg.segmentation)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut out = Vec::new();
    for s in &segments {
        let patch = match &a.out {
            Some(dir) => {
                let p = dir.join(format!("segment_{}.png", s.index));
                s.patch.save_png(&p)?;
                Some(p.display().to_string())
            }
            None => None,
        };
        let r = s.region;
        out.push(RegionOut { index: s.index, left: r.left, top: r.top, width: r.width, height: r.height, patch });
    }
    print_json(&out)
}

fn bundle(cfg: &RunConfig, gan: Option<&PathBuf>, cnn: &Path) -> anyhow::Result<SolverBundle> {
    let cnn = CharClassifier::from_checkpoint(&load_ckpt(cnn)?)?;
    let bundle = SolverBundle {
        denoiser: denoiser(gan)?,
        seg_cfg: SegmentationConfig {
            patch_size: cnn.patch_size,
            ..cfg.segmentation.clone()
        },
        cnn,
        max_attempts: cfg.max_attempts,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn solve_cmd(cfg: &mut RunConfig, a: SolveArgs) -> anyhow::Result<()> {
    cfg.max_attempts = a.attempts.unwrap_or(cfg.max_attempts);
    if let Some(m) = a.method {
        cfg.segmentation.method = m.into();
    }
    log_config(cfg);
    let bundle = bundle(cfg, a.gan.as_ref(), &a.cnn)?;
    let pred = solve(&load_img(&a.img)?, &bundle)?;
    print_json(&serde_json::json!({
        "attempts": pred.attempts,
        "scores": pred.scores,
        "regions": pred.regions.len(),
        "timings_ms": pred.timings,
        "diagnostic": pred.diagnostic,
    }))
}

fn finish_report(cfg: &RunConfig, mut report: ExperimentReport, out: Option<PathBuf>) -> anyhow::Result<()> {
    let experiment = std::mem::take(&mut report.config);
    report.config = serde_json::json!({ "experiment": experiment, "run": cfg.to_json() });
    let dir = out.unwrap_or_else(|| cfg.out_root.join("reports"));
    let files = emit_report(&report, &dir)?;
    for m in &report.metrics {
        match m.value {
            Some(v) => println!("{:<28} {:<28} {:<14} {v:.4}", m.row, m.column, m.metric),
            None => println!("{:<28} {:<28} {:<14} {}", m.row, m.column, m.metric, m.status),
        }
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    println!("wrote {}, {} and {}", files.csv.display(), files.json.display(), files.plot.display());
    Ok(())
}

fn eval_ssim(cfg: &mut RunConfig, a: SsimArgs) -> anyhow::Result<()> {
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let categories = if a.categories.is_empty() { NoiseCategory::NOISY.to_vec() } else { a.categories };
    let ck = load_ckpt(&a.gan)?;
    log::info!("scoring {} images per category", a.count);
    let report = run_ssim_experiment(&categories, &ck, &cfg.style, a.count, cfg.seed)?;
    finish_report(cfg, report, a.out)
}

fn eval_lengths(cfg: &mut RunConfig, a: LengthsArgs) -> anyhow::Result<()> {
    let l = &mut cfg.lengths;
    if let Some(v) = a.lengths {
        l.lengths = v;
    }
    l.train_per_length = a.train.unwrap_or(l.train_per_length);
    l.test_per_length = a.test.unwrap_or(l.test_per_length);
    l.char_cnn.epochs = a.cnn_epochs.unwrap_or(l.char_cnn.epochs);
    l.image_cnn.epochs = a.image_epochs.unwrap_or(l.image_cnn.epochs);
    l.include_mixed |= a.mixed;
    l.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let ck = load_ckpt(&a.gan)?;
    log::info!("running length experiment over lengths {:?}", cfg.lengths.lengths);
    let report = run_length_experiment(&cfg.lengths, &ck)?;
    finish_report(cfg, report, a.out)
}

fn eval_ablation(cfg: &mut RunConfig, a: AblationArgs) -> anyhow::Result<()> {
    let ab = &mut cfg.ablation;
    ab.train_per_profile = a.train.unwrap_or(ab.train_per_profile);
    ab.test_per_profile = a.test.unwrap_or(ab.test_per_profile);
    ab.char_cnn.epochs = a.cnn_epochs.unwrap_or(ab.char_cnn.epochs);
    ab.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let ck = load_ckpt(&a.gan)?;
    log::info!("running ablation over {} profiles", cfg.ablation.profiles.len());
    let report = run_ablation(&cfg.ablation, &ck)?;
    finish_report(cfg, report, a.out)
}

fn gate_serve(cfg: &mut RunConfig, a: ServeArgs) -> anyhow::Result<()> {
    let g = &mut cfg.gate;
    g.pages = a.pages.unwrap_or(g.pages);
    g.challenge_period = a.period.unwrap_or(g.challenge_period);
    if a.strict {
        g.schedule = Schedule::Strict;
    }
    if let Some(n) = a.noise {
        g.noise = NoiseSpec::category(n);
    }
    if let Some(len) = a.length {
        g.style.length_range = len;
    }
    if let Some(cs) = a.charset {
        g.style.charset = cs;
    }
    if let Some(h) = a.host {
        g.host = h;
    }
    g.port = a.port.unwrap_or(g.port);
    g.seed = a.seed.unwrap_or(cfg.seed);
    log_config(cfg);
    let handle = serve_gate(cfg.gate.clone())?;
    println!("gate listening on {}", handle.url());
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

fn gate_crawl(cfg: &mut RunConfig, a: CrawlArgs) -> anyhow::Result<()> {
    cfg.crawl.pages = a.pages.unwrap_or(cfg.crawl.pages);
    if a.charset.is_some() {
        cfg.crawl.charset = a.charset;
    }
    cfg.max_attempts = a.attempts.unwrap_or(cfg.max_attempts);
    log_config(cfg);
    let bundle = bundle(cfg, a.gan.as_ref(), &a.cnn)?;
    let stats = crawl_gate(&a.url, &mut &bundle, &cfg.crawl)?;
    stats.check_invariants().map_err(|e| anyhow!("crawl statistics are inconsistent: {e}"))?;
    print_json(&stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_and_size_parsers() {
        assert_eq!(parse_range("4:7"), Ok((4, 7)));
        assert_eq!(parse_range("5"), Ok((5, 5)));
        assert!(parse_range("a:7").is_err());
        assert_eq!(parse_size("64x24"), Ok((64, 24)));
        assert!(parse_size("64").is_err());
    }

    #[test]
    fn length_list_is_comma_separated() {
        let cli = Cli::try_parse_from(["forge", "eval", "lengths", "--gan", "g", "--lengths", "4,5,6"]).unwrap();
        let Command::Eval(EvalCommand::Lengths(a)) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.lengths, Some(vec![4, 5, 6]));
    }

    #[test]
    fn config_file_overrides_nested_fields_only() {
        let dir = std::env::temp_dir().join(format!("forge-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{"seed": 9, "gan": {"epochs": 3}, "gate": {"challenge_period": 4}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gan.epochs, 3);
        assert_eq!(cfg.gan.learning_rate, d.gan.learning_rate);
        assert_eq!(cfg.gate.challenge_period, 4);
        assert_eq!(cfg.gate.pages, d.gate.pages);
        std::fs::write(&path, "[1]").unwrap();
        assert!(RunConfig::load(Some(&path)).unwrap_err().is::<Usage>());
        std::fs::write(&path, r#"{"gan": {"epochs": "many"}}"#).unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
