//! Experiment harness: success rate, SSIM before/after denoising, the
//! variable-length comparison and the component ablation, plus report
//! emission (CSV, JSON, SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::image::CaptchaImage;
use crate::nn::ModelCheckpoint;
use crate::ops::{grayscale, ssim, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use crate::pipeline::{solve_denoised, Denoiser, Prediction, SolverBundle};
use crate::recognize::{
    char_samples, source_image, train_char_cnn, train_image_level_baseline, CharClassifier, CharSample, CnnConfig,
    ImageClassifier, PatchSource,
};
use crate::segment::{SegMethod, SegmentationConfig};
use crate::synth::{derive_seed, synthesize_set, Charset, LabeledSample, NoiseCategory, NoiseSpec, StyleSpec, CANONICAL_SIZE};

/// Fraction of items where one of the first `attempts_allowed` attempts
/// equals the label after case folding.
pub fn success_rate(predictions: &[Prediction], labels: &[String], attempts_allowed: usize, charset: &Charset) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if attempts_allowed < 1 {
        return Err(Error::param("attempts allowed must be >= 1"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| {
            let want = charset.normalize_answer(l);
            p.attempts.iter().take(attempts_allowed).any(|a| charset.normalize_answer(a) == want)
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// SHA-256 over labels and 8-bit pixels of an in-memory dataset.
pub fn dataset_hash(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.label.as_bytes());
        h.update([0u8]);
        for img in [&s.noisy, &s.clean] {
            h.update((img.width() as u32).to_le_bytes());
            h.update((img.height() as u32).to_le_bytes());
            h.update(img.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<u8>>());
        }
    }
    hex::encode(h.finalize())
}

/// One cell of a report's metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub row: String,
    pub column: String,
    pub metric: String,
    /// Absent when the method cannot produce the value at all.
    pub value: Option<f64>,
    pub status: String,
    pub seed: u64,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Grouped bars: one group per row label, one bar per column.
    Bars,
    /// One line per row label across the columns.
    Lines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Dataset name to content hash.
    pub datasets: BTreeMap<String, String>,
    pub metrics: Vec<MetricRow>,
    pub plot: PlotKind,
    /// Plot metric; other metrics appear only in the tables.
    pub plot_metric: String,
    pub notes: Vec<String>,
    pub environment: String,
}

impl ExperimentReport {
    fn new(id: &str, seed: u64, config: serde_json::Value, plot: PlotKind, plot_metric: &str) -> Self {
        Self {
            experiment_id: id.into(),
            seed,
            config,
            datasets: BTreeMap::new(),
            metrics: Vec::new(),
            plot,
            plot_metric: plot_metric.into(),
            notes: Vec::new(),
            environment: format!("cpu, f32 inference, {} {}", std::env::consts::OS, std::env::consts::ARCH),
        }
    }

    fn push(&mut self, row: &str, column: &str, metric: &str, value: Option<f64>, dataset: &str) {
        let hash = self.datasets.get(dataset).cloned().unwrap_or_default();
        self.metrics.push(MetricRow {
            row: row.into(),
            column: column.into(),
            metric: metric.into(),
            value,
            status: if value.is_some() { "ok" } else { "incapable" }.into(),
            seed: self.seed,
            dataset_hash: hash,
        });
    }

    pub fn value(&self, row: &str, column: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.row == row && m.column == column && m.metric == metric)
            .and_then(|m| m.value)
    }

    pub fn rows(&self) -> Vec<String> {
        unique(self.metrics.iter().map(|m| m.row.clone()))
    }

    pub fn columns(&self) -> Vec<String> {
        unique(self.metrics.iter().map(|m| m.column.clone()))
    }

    /// Identifier shared by every emitted file.
    pub fn stem(&self) -> String {
        format!("{}_seed{}", self.experiment_id, self.seed)
    }
}

fn unique(it: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn samples_for(style: &StyleSpec, noise: &NoiseSpec, count: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    synthesize_set(style, noise, count, seed)
}

/// Mean SSIM of noisy and of denoised images against their clean originals,
/// per noise category.
pub fn run_ssim_experiment(
    categories: &[NoiseCategory],
    gan_ckpt: &ModelCheckpoint,
    style: &StyleSpec,
    n_per_type: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if n_per_type == 0 {
        return Err(Error::param("n_per_type must be >= 1"));
    }
    let gan = GanModel::from_checkpoint(gan_ckpt)?;
    let config = serde_json::json!({
        "categories": categories.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "n_per_type": n_per_type,
        "style": style,
        "ssim": {"window": SSIM_WINDOW, "c1": SSIM_C1, "c2": SSIM_C2},
        "gan_training": gan_ckpt.training_meta.config,
    });
    let mut report = ExperimentReport::new("ssim", seed, config, PlotKind::Bars, "ssim");
    if gan_ckpt.training_meta.epochs_completed == 0 {
        report.notes.push("GAN checkpoint has no completed training epochs; results describe an untrained model".into());
    }
    for (i, &cat) in categories.iter().enumerate() {
        let set = samples_for(style, &NoiseSpec::category(cat), n_per_type, derive_seed(seed, 100 + i as u64))?;
        report.datasets.insert(cat.name().to_string(), dataset_hash(&set));
        let (mut before, mut after) = (0.0, 0.0);
        for s in &set {
            let clean = grayscale(&s.clean);
            before += ssim(&grayscale(&s.noisy), &clean)?;
            after += ssim(&gan.denoise(&s.noisy)?, &clean)?;
        }
        let n = set.len() as f64;
        report.push(cat.name(), "before", "ssim", Some(before / n), cat.name());
        report.push(cat.name(), "after", "ssim", Some(after / n), cat.name());
    }
    Ok(report)
}

/// Builds character training patches by segmenting clean renderings,
/// keeping at most `cap` patches spread evenly over the inputs.
pub fn clean_char_samples(sets: &[&[LabeledSample]], seg: &SegmentationConfig, cap: usize) -> Result<Vec<CharSample>> {
    let mut all = Vec::new();
    for set in sets {
        for s in set.iter() {
            let img = source_image(&s.noisy, Some(&s.clean), PatchSource::Clean)?;
            all.extend(char_samples(&img, &s.boxes, &s.label, seg)?);
        }
    }
    if all.len() > cap && cap > 0 {
        let step = all.len() as f64 / cap as f64;
        all = (0..cap).map(|i| all[(i as f64 * step) as usize].clone()).collect();
    }
    Ok(all)
}

/// Trains a character CNN on clean segments, holding out a tenth for
/// validation.
pub fn train_clean_char_cnn(
    sets: &[&[LabeledSample]],
    charset: &Charset,
    seg: &SegmentationConfig,
    cap: usize,
    cfg: &CnnConfig,
) -> Result<ModelCheckpoint> {
    let samples = clean_char_samples(sets, seg, cap)?;
    let n_val = samples.len() / 10;
    let (val, train) = samples.split_at(n_val);
    train_char_cnn(train, val, charset, cfg, None)
}

/// Denoised renditions of a test set, computed once and shared by every
/// solver variant that uses the same denoiser.
fn denoise_all(set: &[LabeledSample], bundle: &SolverBundle) -> Result<Vec<Option<CaptchaImage>>> {
    set.iter()
        .map(|s| match bundle.denoise(&s.noisy) {
            Err(Error::EmptyCaptcha) => Ok(None),
            other => other.map(Some),
        })
        .collect()
}

fn predict_all(denoised: &[Option<CaptchaImage>], bundle: &SolverBundle) -> Result<Vec<Prediction>> {
    denoised.iter().map(|d| solve_denoised(d.as_ref(), bundle)).collect()
}

fn labels(set: &[LabeledSample]) -> Vec<String> {
    set.iter().map(|s| s.label.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMethod {
    ImageLevelCnnPreproc,
    CharLevelInterval,
    CharLevelBorderTracing,
    DwganSegmentation,
}

impl LengthMethod {
    pub const ALL: [LengthMethod; 4] = [
        LengthMethod::ImageLevelCnnPreproc,
        LengthMethod::CharLevelInterval,
        LengthMethod::CharLevelBorderTracing,
        LengthMethod::DwganSegmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LengthMethod::ImageLevelCnnPreproc => "image_level_cnn_preproc",
            LengthMethod::CharLevelInterval => "char_level_interval",
            LengthMethod::CharLevelBorderTracing => "char_level_border_tracing",
            LengthMethod::DwganSegmentation => "dwgan_segmentation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthExperimentConfig {
    pub lengths: Vec<usize>,
    pub methods: Vec<LengthMethod>,
    pub train_per_length: usize,
    pub test_per_length: usize,
    pub charset: Charset,
    pub noise: NoiseCategory,
    /// Shared character recognizer, trained once on clean segments of every
    /// length's training set.
    pub char_cnn: CnnConfig,
    /// Upper bound on the recognizer's training patches.
    pub max_char_patches: usize,
    pub image_cnn: CnnConfig,
    /// Resolution the image-level baseline's network sees.
    pub image_net_size: (usize, usize),
    pub attempts_allowed: usize,
    /// Also evaluate on a mixed-length test set, where the image-level model
    /// is structurally incapable.
    pub include_mixed: bool,
    pub seed: u64,
}

impl Default for LengthExperimentConfig {
    fn default() -> Self {
        Self {
            lengths: vec![4, 5, 6, 7],
            methods: LengthMethod::ALL.to_vec(),
            train_per_length: 2000,
            test_per_length: 200,
            charset: Charset::digits(),
            noise: NoiseCategory::DotsCurves,
            char_cnn: CnnConfig::default(),
            max_char_patches: 10_000,
            image_cnn: CnnConfig::default(),
            image_net_size: (80, 30),
            attempts_allowed: 1,
            include_mixed: false,
            seed: 0,
        }
    }
}

fn char_bundle(cnn: &CharClassifier, denoiser: Denoiser, method: SegMethod) -> SolverBundle {
    SolverBundle {
        denoiser,
        cnn: cnn.clone(),
        seg_cfg: SegmentationConfig {
            method,
            patch_size: cnn.patch_size,
            ..SegmentationConfig::default()
        },
        max_attempts: crate::pipeline::DEFAULT_MAX_ATTEMPTS,
    }
}

/// Success rate of each method at each captcha length.
pub fn run_length_experiment(cfg: &LengthExperimentConfig, gan_ckpt: &ModelCheckpoint) -> Result<ExperimentReport> {
    if cfg.lengths.is_empty() || cfg.methods.is_empty() {
        return Err(Error::param("need at least one length and one method"));
    }
    if cfg.train_per_length == 0 || cfg.test_per_length == 0 {
        return Err(Error::param("train and test sizes must be >= 1"));
    }
    let gan = GanModel::from_checkpoint(gan_ckpt)?;
    let config = serde_json::json!({ "experiment": cfg, "gan_training": gan_ckpt.training_meta.config });
    let mut report = ExperimentReport::new("lengths", cfg.seed, config, PlotKind::Lines, "success_rate");
    let noise = NoiseSpec::category(cfg.noise);
    let style_for = |range: (usize, usize)| StyleSpec {
        charset: cfg.charset.clone(),
        length_range: range,
        canvas: CANONICAL_SIZE,
        ..StyleSpec::default()
    };

    let mut data = Vec::new();
    for (i, &len) in cfg.lengths.iter().enumerate() {
        let style = style_for((len, len));
        let train = samples_for(&style, &noise, cfg.train_per_length, derive_seed(cfg.seed, 200 + i as u64))?;
        let test = samples_for(&style, &noise, cfg.test_per_length, derive_seed(cfg.seed, 300 + i as u64))?;
        report.datasets.insert(format!("train_len{len}"), dataset_hash(&train));
        report.datasets.insert(format!("test_len{len}"), dataset_hash(&test));
        data.push((len, train, test));
    }
    let mixed = if cfg.include_mixed {
        let lo = *cfg.lengths.iter().min().unwrap();
        let hi = *cfg.lengths.iter().max().unwrap();
        let test = samples_for(&style_for((lo, hi)), &noise, cfg.test_per_length, derive_seed(cfg.seed, 399))?;
        report.datasets.insert("test_mixed".into(), dataset_hash(&test));
        Some(test)
    } else {
        None
    };

    let needs_char = cfg.methods.iter().any(|m| *m != LengthMethod::ImageLevelCnnPreproc);
    let cnn = if needs_char {
        let sets: Vec<&[LabeledSample]> = data.iter().map(|(_, train, _)| train.as_slice()).collect();
        let ck = train_clean_char_cnn(&sets, &cfg.charset, &SegmentationConfig::default(), cfg.max_char_patches, &cfg.char_cnn)?;
        report.notes.push(format!(
            "shared character CNN: {:?}",
            ck.training_meta.final_losses
        ));
        Some(CharClassifier::from_checkpoint(&ck)?)
    } else {
        None
    };

    let evaluate = |report: &mut ExperimentReport, column: &str, dataset: &str, test: &[LabeledSample], fixed: Option<usize>, image_model: Option<&ImageClassifier>| -> Result<()> {
        let truth = labels(test);
        let mut gan_denoised = None;
        let mut pre_denoised = None;
        for &method in &cfg.methods {
            let rate = match method {
                LengthMethod::ImageLevelCnnPreproc => match (fixed, image_model) {
                    (Some(_), Some(model)) => {
                        let preds = test
                            .iter()
                            .map(|s| {
                                let text = model.classify_labeled(&s.noisy, s.label.chars().count())?;
                                Ok(Prediction { attempts: vec![text], ..Default::default() })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(success_rate(&preds, &truth, cfg.attempts_allowed, &cfg.charset)?)
                    }
                    _ => None,
                },
                _ => {
                    let cnn = cnn.as_ref().expect("char cnn trained for char-level methods");
                    let (denoiser, seg, cache) = match method {
                        LengthMethod::DwganSegmentation => (Denoiser::Gan(gan.clone()), SegMethod::Full, &mut gan_denoised),
                        LengthMethod::CharLevelInterval => (Denoiser::Preprocess, SegMethod::IntervalOnly, &mut pre_denoised),
                        _ => (Denoiser::Preprocess, SegMethod::TracingOnly, &mut pre_denoised),
                    };
                    let bundle = char_bundle(cnn, denoiser, seg);
                    if cache.is_none() {
                        *cache = Some(denoise_all(test, &bundle)?);
                    }
                    let preds = predict_all(cache.as_ref().unwrap(), &bundle)?;
                    Some(success_rate(&preds, &truth, cfg.attempts_allowed, &cfg.charset)?)
                }
            };
            report.push(method.name(), column, "success_rate", rate, dataset);
        }
        Ok(())
    };

    let mut image_models = Vec::new();
    for (len, train, test) in &data {
        let model = if cfg.methods.contains(&LengthMethod::ImageLevelCnnPreproc) {
            let pairs: Vec<(CaptchaImage, String)> = train.iter().map(|s| (s.noisy.clone(), s.label.clone())).collect();
            let ck = train_image_level_baseline(&pairs, &[], *len, &cfg.charset, cfg.image_net_size, &cfg.image_cnn)?;
            Some(ImageClassifier::from_checkpoint(&ck)?)
        } else {
            None
        };
        evaluate(&mut report, &len.to_string(), &format!("test_len{len}"), test, Some(*len), model.as_ref())?;
        image_models.extend(model);
    }
    if let Some(test) = &mixed {
        evaluate(&mut report, "mixed", "test_mixed", test, None, None)?;
        if let Some(model) = image_models.first() {
            let incompatible = test
                .iter()
                .filter(|s| matches!(model.classify_labeled(&s.noisy, s.label.chars().count()), Err(Error::Incompatible { .. })))
                .count();
            report.notes.push(format!(
                "image-level model with {} heads rejected {incompatible} of {} mixed-length images as incompatible",
                model.heads,
                test.len()
            ));
        }
    }
    Ok(report)
}

/// A synthetic stand-in for one captcha-protected platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub charset: Charset,
    pub length: usize,
    pub noise: NoiseCategory,
}

impl PlatformProfile {
    /// The three stand-ins used by the ablation.
    pub fn defaults() -> Vec<PlatformProfile> {
        vec![
            PlatformProfile {
                name: "digits_len4_curves".into(),
                charset: Charset::digits(),
                length: 4,
                noise: NoiseCategory::Curves,
            },
            PlatformProfile {
                name: "digits_len5_dense_dots".into(),
                charset: Charset::digits(),
                length: 5,
                noise: NoiseCategory::DenseDots,
            },
            PlatformProfile {
                name: "alnum_len6_dense_curves".into(),
                charset: Charset::alnum(),
                length: 6,
                noise: NoiseCategory::DenseCurves,
            },
        ]
    }

    pub fn style(&self) -> StyleSpec {
        StyleSpec {
            charset: self.charset.clone(),
            length_range: (self.length, self.length),
            canvas: CANONICAL_SIZE,
            ..StyleSpec::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoBackgroundDenoising,
    NoBorderTracing,
    NoIntervalSegmentation,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoBackgroundDenoising,
        AblationVariant::NoBorderTracing,
        AblationVariant::NoIntervalSegmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoBackgroundDenoising => "no_background_denoising",
            AblationVariant::NoBorderTracing => "no_border_tracing",
            AblationVariant::NoIntervalSegmentation => "no_interval_segmentation",
        }
    }

    fn parts(self) -> (bool, SegMethod) {
        match self {
            AblationVariant::Full => (true, SegMethod::Full),
            AblationVariant::NoBackgroundDenoising => (false, SegMethod::Full),
            AblationVariant::NoBorderTracing => (true, SegMethod::IntervalOnly),
            AblationVariant::NoIntervalSegmentation => (true, SegMethod::TracingOnly),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<AblationVariant>,
    pub profiles: Vec<PlatformProfile>,
    pub train_per_profile: usize,
    pub test_per_profile: usize,
    /// One recognizer per profile, shared by every variant.
    pub char_cnn: CnnConfig,
    pub max_char_patches: usize,
    pub attempts_allowed: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            profiles: PlatformProfile::defaults(),
            train_per_profile: 2000,
            test_per_profile: 200,
            char_cnn: CnnConfig::default(),
            max_char_patches: 10_000,
            attempts_allowed: 1,
            seed: 0,
        }
    }
}

/// The ablation column holding the cross-profile mean.
pub const AVERAGE_COLUMN: &str = "average";

/// Success rate of each variant on each profile, plus the cross-profile
/// average.
pub fn run_ablation(cfg: &AblationConfig, gan_ckpt: &ModelCheckpoint) -> Result<ExperimentReport> {
    if cfg.variants.is_empty() || cfg.profiles.is_empty() {
        return Err(Error::param("need at least one variant and one profile"));
    }
    let gan = GanModel::from_checkpoint(gan_ckpt)?;
    let config = serde_json::json!({ "experiment": cfg, "gan_training": gan_ckpt.training_meta.config });
    let mut report = ExperimentReport::new("ablation", cfg.seed, config, PlotKind::Bars, "success_rate");
    let mut per_variant: BTreeMap<AblationVariant, Vec<f64>> = BTreeMap::new();
    for (i, profile) in cfg.profiles.iter().enumerate() {
        let style = profile.style();
        let noise = NoiseSpec::category(profile.noise);
        let train = samples_for(&style, &noise, cfg.train_per_profile, derive_seed(cfg.seed, 400 + i as u64))?;
        let test = samples_for(&style, &noise, cfg.test_per_profile, derive_seed(cfg.seed, 500 + i as u64))?;
        report.datasets.insert(format!("train_{}", profile.name), dataset_hash(&train));
        report.datasets.insert(format!("test_{}", profile.name), dataset_hash(&test));
        let ck = train_clean_char_cnn(&[&train], &profile.charset, &SegmentationConfig::default(), cfg.max_char_patches, &cfg.char_cnn)?;
        let cnn = CharClassifier::from_checkpoint(&ck)?;
        let truth = labels(&test);
        let mut cache: [Option<Vec<Option<CaptchaImage>>>; 2] = [None, None];
        for &variant in &cfg.variants {
            let (denoise, method) = variant.parts();
            let denoiser = if denoise { Denoiser::Gan(gan.clone()) } else { Denoiser::Preprocess };
            let bundle = char_bundle(&cnn, denoiser, method);
            let slot = &mut cache[denoise as usize];
            if slot.is_none() {
                *slot = Some(denoise_all(&test, &bundle)?);
            }
            let preds = predict_all(slot.as_ref().unwrap(), &bundle)?;
            let rate = success_rate(&preds, &truth, cfg.attempts_allowed, &profile.charset)?;
            report.push(variant.name(), &profile.name, "success_rate", Some(rate), &format!("test_{}", profile.name));
            per_variant.entry(variant).or_default().push(rate);
        }
    }
    for &variant in &cfg.variants {
        let rates = &per_variant[&variant];
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        report.metrics.push(MetricRow {
            row: variant.name().into(),
            column: AVERAGE_COLUMN.into(),
            metric: "success_rate".into(),
            value: Some(mean),
            status: "ok".into(),
            seed: cfg.seed,
            dataset_hash: String::new(),
        });
    }
    Ok(report)
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub plot: PathBuf,
}

/// Writes `<id>_seed<seed>.csv`, `.json` and `.svg` into `out_dir`.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<EmittedFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = report.stem();
    let files = EmittedFiles {
        csv: out_dir.join(format!("{stem}.csv")),
        json: out_dir.join(format!("{stem}.json")),
        plot: out_dir.join(format!("{stem}.svg")),
    };
    let mut w = csv::Writer::from_path(&files.csv)?;
    for m in &report.metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(&files.csv, e))?;

    let mut with_plot = report.clone();
    with_plot.notes.push(format!("plot: {}", files.plot.file_name().unwrap().to_string_lossy()));
    let json = serde_json::to_string_pretty(&with_plot)?;
    std::fs::write(&files.json, json + "\n").map_err(|e| Error::io(&files.json, e))?;
    std::fs::write(&files.plot, render_svg(report)).map_err(|e| Error::io(&files.plot, e))?;
    Ok(files)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const PALETTE: [&str; 6] = ["#4472c4", "#ed7d31", "#70ad47", "#7f3f98", "#c00000", "#264478"];

fn render_svg(report: &ExperimentReport) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 190.0, 40.0, 70.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rows = report.rows();
    let cols = report.columns();
    let get = |r: &str, c: &str| report.value(r, c, &report.plot_metric);
    let max = report
        .metrics
        .iter()
        .filter(|m| m.metric == report.plot_metric)
        .filter_map(|m| m.value)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let ymax = if max <= 1.0 { 1.0 } else { max * 1.1 };
    let y = |v: f64| top + ph * (1.0 - v / ymax);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{} ({})</text>"#, left + pw / 2.0, report.experiment_id, report.plot_metric);
    for i in 0..=5 {
        let v = ymax * i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, yy + 4.0);
    }
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, top + ph, left + pw, top + ph);

    match report.plot {
        PlotKind::Bars => {
            let group_w = pw / rows.len().max(1) as f64;
            let bar_w = group_w * 0.8 / cols.len().max(1) as f64;
            for (ri, r) in rows.iter().enumerate() {
                let gx = left + group_w * ri as f64 + group_w * 0.1;
                for (ci, c) in cols.iter().enumerate() {
                    if let Some(v) = get(r, c) {
                        let x = gx + bar_w * ci as f64;
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                            y(v),
                            bar_w * 0.95,
                            top + ph - y(v),
                            PALETTE[ci % PALETTE.len()]
                        );
                    }
                }
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, gx + group_w * 0.4, top + ph + 16.0, r);
            }
            legend(&mut s, &cols, left + pw + 12.0, top);
        }
        PlotKind::Lines => {
            let step = pw / cols.len().max(1) as f64;
            for (ci, c) in cols.iter().enumerate() {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#, left + step * (ci as f64 + 0.5), top + ph + 16.0);
            }
            for (ri, r) in rows.iter().enumerate() {
                let color = PALETTE[ri % PALETTE.len()];
                let pts: Vec<String> = cols
                    .iter()
                    .enumerate()
                    .filter_map(|(ci, c)| get(r, c).map(|v| format!("{:.1},{:.1}", left + step * (ci as f64 + 0.5), y(v))))
                    .collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
                for p in &pts {
                    let (px, py) = p.split_once(',').unwrap();
                    let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
                }
            }
            legend(&mut s, &rows, left + pw + 12.0, top);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, names: &[String], x: f64, y: f64) {
    for (i, n) in names.iter().enumerate() {
        let yy = y + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{yy:.1}" width="12" height="12" fill="{}"/>"#, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{n}</text>"#, x + 16.0, yy + 10.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(attempts: &[&str]) -> Prediction {
        Prediction {
            attempts: attempts.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    fn recount(preds: &[Prediction], labels: &[String], k: usize, cs: &Charset) -> f64 {
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| p.attempts.iter().take(k).any(|a| cs.normalize_answer(a) == cs.normalize_answer(l)))
            .count();
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn success_rate_rules() {
        let cs = Charset::alnum();
        let labels: Vec<String> = ["AB12", "XY34", "QQ11", "ZZ99"].iter().map(|s| s.to_string()).collect();
        let all = vec![pred(&["ab12"]), pred(&["XY34"]), pred(&["QQ11"]), pred(&["ZZ99"])];
        assert_eq!(success_rate(&all, &labels, 1, &cs).unwrap(), 1.0);
        let one_wrong = vec![pred(&["AB12"]), pred(&["XY35"]), pred(&["QQ11"]), pred(&["ZZ99"])];
        assert_eq!(success_rate(&one_wrong, &labels, 1, &cs).unwrap(), 0.75);
        let second = vec![pred(&["AB13", "AB12"]), pred(&[]), pred(&["QQ11"]), pred(&["ZZ99"])];
        assert_eq!(success_rate(&second, &labels, 1, &cs).unwrap(), 0.5);
        assert_eq!(success_rate(&second, &labels, 2, &cs).unwrap(), 0.75);
        assert!(matches!(success_rate(&all[..3], &labels, 1, &cs), Err(Error::Contract(_))));

        let labels: Vec<String> = (0..500).map(|i| format!("{i:04}")).collect();
        let preds: Vec<Prediction> = (0..500).map(|i| pred(&[&format!("{:04}", if i < 472 { i } else { i + 1 })])).collect();
        let rate = success_rate(&preds, &labels, 1, &Charset::digits()).unwrap();
        assert!((rate - 0.944).abs() < 1e-12);
        assert_eq!(rate, recount(&preds, &labels, 1, &Charset::digits()));
    }

    fn sample_report() -> ExperimentReport {
        let mut r = ExperimentReport::new("demo", 7, serde_json::json!({"k": 1}), PlotKind::Bars, "success_rate");
        r.datasets.insert("d".into(), "abc".into());
        r.push("full", "p1", "success_rate", Some(0.1 + 0.2), "d");
        r.push("full", "p2", "success_rate", Some(2.0 / 3.0), "d");
        r.push("base", "p1", "success_rate", None, "d");
        r
    }

    #[test]
    fn report_files_round_trip_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let a = emit_report(&r, &dir.path().join("a")).unwrap();
        let b = emit_report(&r, &dir.path().join("b")).unwrap();
        assert!(a.csv.file_name().unwrap().to_string_lossy().contains("demo_seed7"));
        assert_eq!(read_metrics_csv(&a.csv).unwrap(), r.metrics);
        for (x, y) in [(&a.csv, &b.csv), (&a.json, &b.json), (&a.plot, &b.plot)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&a.json).unwrap()).unwrap();
        assert_eq!(json["datasets"]["d"], "abc");
        assert!(std::fs::read_to_string(&a.plot).unwrap().starts_with("<svg"));
        let mut lines = r.clone();
        lines.plot = PlotKind::Lines;
        assert!(render_svg(&lines).contains("polyline"));
    }

    #[test]
    fn ssim_experiment_rejects_zero_count() {
        let ck = ModelCheckpoint::new(
            crate::nn::Architecture::Gan {
                generator: Default::default(),
                discriminator: Default::default(),
                input_size: CANONICAL_SIZE,
            },
            Default::default(),
        );
        let err = run_ssim_experiment(&NoiseCategory::NOISY, &ck, &StyleSpec::default(), 0, 1);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let style = StyleSpec { canvas: (60, 24), ..StyleSpec::default() };
        let a = synthesize_set(&style, &NoiseSpec::none(), 3, 1).unwrap();
        let b = synthesize_set(&style, &NoiseSpec::none(), 3, 1).unwrap();
        let c = synthesize_set(&style, &NoiseSpec::none(), 3, 2).unwrap();
        assert_eq!(dataset_hash(&a), dataset_hash(&b));
        assert_ne!(dataset_hash(&a), dataset_hash(&c));
    }
}
