//! Character recognition: the per-segment CNN classifier and the whole-image
//! multi-head baseline it is compared against.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{residual_cleanup, GanModel};
use crate::image::CaptchaImage;
use crate::nn::loss::{softmax_cross_entropy, softmax_rows};
use crate::nn::{build_cnn, Adam, AdamConfig, Architecture, CnnSpec, EpochRecord, ModelCheckpoint, Sequential, Tensor, TrainingMeta};
use crate::ops::{gaussian_smooth, grayscale, normalize, DEFAULT_SMOOTH_KERNEL, DEFAULT_SMOOTH_SIGMA};
use crate::segment::{segment, CharRegion, Segment, SegmentationConfig};
use crate::synth::{derive_seed, Charset, DatasetManifest, GlyphBox, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub cnn: CnnSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Samples per forward/backward chunk; bounds memory only.
    pub micro_batch: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            cnn: CnnSpec::default(),
            learning_rate: 0.001,
            batch_size: 200,
            epochs: 100,
            seed: 0,
            micro_batch: 50,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be > 0"));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.micro_batch < 1 {
            return Err(Error::param("batch size, epochs and micro batch must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.cnn.dropout) {
            return Err(Error::param("dropout must be in [0, 1)"));
        }
        if self.cnn.conv_filters.is_empty() || self.cnn.kernel % 2 == 0 {
            return Err(Error::param("need at least one conv stage with an odd kernel"));
        }
        Ok(())
    }
}

/// Probability per charset symbol, in charset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharDistribution {
    pub symbols: Vec<char>,
    pub probabilities: Vec<f64>,
}

impl CharDistribution {
    pub fn new(symbols: Vec<char>, probabilities: Vec<f64>) -> Result<Self> {
        if symbols.is_empty() || symbols.len() != probabilities.len() {
            return Err(Error::contract("distribution needs one probability per symbol"));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::contract("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { symbols, probabilities })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, c: char) -> Option<f64> {
        self.symbols.iter().position(|&s| s == c).map(|i| self.probabilities[i])
    }

    /// Most probable symbol; ties go to the earlier charset symbol.
    pub fn argmax(&self) -> (char, f64) {
        let mut best = 0;
        for i in 1..self.probabilities.len() {
            if self.probabilities[i] > self.probabilities[best] {
                best = i;
            }
        }
        (self.symbols[best], self.probabilities[best])
    }

    pub fn as_map(&self) -> BTreeMap<char, f64> {
        self.symbols.iter().copied().zip(self.probabilities.iter().copied()).collect()
    }
}

/// A labeled character patch.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSample {
    pub patch: CaptchaImage,
    pub label: char,
}

/// Network input encoding shared by training and inference: grayscale with
/// ink high and background near zero.
fn encode(img: &CaptchaImage, out: &mut Vec<f32>) {
    out.extend(img.pixels().iter().map(|&v| 1.0 - v));
}

fn stack(imgs: &[&CaptchaImage]) -> Tensor<f32> {
    let (w, h) = imgs[0].dims();
    let mut data = Vec::with_capacity(imgs.len() * w * h);
    for img in imgs {
        encode(img, &mut data);
    }
    Tensor::from_vec([imgs.len(), 1, h, w], data)
}

/// Fraction of samples whose every head's argmax (ties to the lowest index)
/// matches its target.
fn exact_matches(logits: &Tensor<f32>, classes: usize, targets: &[usize]) -> usize {
    let heads = logits.sample_len() / classes;
    (0..logits.n())
        .filter(|&i| {
            let row = logits.sample(i);
            (0..heads).all(|h| argmax(&row[h * classes..(h + 1) * classes]) == targets[i * heads + h])
        })
        .count()
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

struct Fitted {
    history: Vec<EpochRecord>,
    steps: u64,
    diverged: Option<(usize, String)>,
}

/// Mini-batch cross-entropy training shared by both recognizers. `inputs`
/// are already-encoded images, `targets` hold `heads` class indices per
/// sample.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut Sequential<f32>,
    shape: (usize, usize),
    inputs: &[Vec<f32>],
    targets: &[Vec<usize>],
    classes: usize,
    validation: Option<(&[Vec<f32>], &[Vec<usize>])>,
    cfg: &CnnConfig,
    on_epoch: &mut dyn FnMut(&Sequential<f32>, &[EpochRecord], u64) -> Result<()>,
) -> Result<Fitted> {
    let (w, h) = shape;
    let gather = |idx: &[usize], inputs: &[Vec<f32>], targets: &[Vec<usize>]| {
        let mut data = Vec::with_capacity(idx.len() * w * h);
        let mut t = Vec::new();
        for &i in idx {
            data.extend_from_slice(&inputs[i]);
            t.extend_from_slice(&targets[i]);
        }
        (Tensor::from_vec([idx.len(), 1, h, w], data), t)
    };
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            for chunk in batch.chunks(cfg.micro_batch) {
                let (x, t) = gather(chunk, inputs, targets);
                let (logits, tape) = net.forward_train(&x, Some(&mut drop_rng));
                let (loss, mut grad) = softmax_cross_entropy(&logits, classes, &t);
                correct += exact_matches(&logits, classes, &t);
                loss_sum += loss * chunk.len() as f64;
                let share = chunk.len() as f32 / b as f32;
                grad.data.iter_mut().for_each(|g| *g *= share);
                net.backward(tape, grad, false);
            }
            opt.step(net.params_mut());
        }
        let n = inputs.len() as f64;
        let mut losses = BTreeMap::from([
            ("train_loss".to_string(), loss_sum / n),
            ("train_accuracy".to_string(), correct as f64 / n),
        ]);
        if !losses["train_loss"].is_finite() {
            return Ok(Fitted {
                history,
                steps: opt.steps(),
                diverged: Some((epoch, format!("non-finite training loss at epoch {epoch}"))),
            });
        }
        if let Some((vx, vt)) = validation.filter(|(vx, _)| !vx.is_empty()) {
            let idx: Vec<usize> = (0..vx.len()).collect();
            let mut hits = 0;
            for chunk in idx.chunks(cfg.micro_batch.max(64)) {
                let (x, t) = gather(chunk, vx, vt);
                hits += exact_matches(&net.forward(&x), classes, &t);
            }
            losses.insert("validation_accuracy".into(), hits as f64 / vx.len() as f64);
        }
        log::info!(
            "cnn epoch {epoch}/{}: loss {:.4} train acc {:.3}{}",
            cfg.epochs,
            losses["train_loss"],
            losses["train_accuracy"],
            losses.get("validation_accuracy").map(|v| format!(" val acc {v:.3}")).unwrap_or_default()
        );
        history.push(EpochRecord { epoch, losses });
        on_epoch(net, &history, opt.steps())?;
    }
    Ok(Fitted {
        history,
        steps: opt.steps(),
        diverged: None,
    })
}

fn meta(cfg: &CnnConfig, charset: &Charset, history: &[EpochRecord], steps: u64, size: (usize, usize)) -> TrainingMeta {
    TrainingMeta {
        config: serde_json::to_value(cfg).expect("config serializes"),
        epochs_completed: history.len(),
        final_losses: history.last().map(|r| r.losses.clone()).unwrap_or_default(),
        history: history.to_vec(),
        optimizer_steps: BTreeMap::from([("cnn".to_string(), steps)]),
        seed: cfg.seed,
        charset: Some(charset.as_string()),
        canonical_size: size,
        note: None,
    }
}

fn char_targets(samples: &[CharSample], charset: &Charset) -> Result<(Vec<Vec<f32>>, Vec<Vec<usize>>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ts = Vec::with_capacity(samples.len());
    for s in samples {
        let idx = charset
            .index(s.label)
            .ok_or_else(|| Error::Data(format!("label {:?} is outside the charset", s.label)))?;
        let mut x = Vec::new();
        encode(&grayscale(&s.patch), &mut x);
        xs.push(x);
        ts.push(vec![idx]);
    }
    Ok((xs, ts))
}

/// Trains the character classifier on labeled patches.
///
/// With `out` set, the checkpoint is written there at the end, or with the
/// last good weights if the loss diverges.
pub fn train_char_cnn(
    train: &[CharSample],
    validation: &[CharSample],
    charset: &Charset,
    cfg: &CnnConfig,
    out: Option<&Path>,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let Some(first) = train.first() else {
        return Err(Error::Precondition("no training patches".into()));
    };
    let size = first.patch.width();
    if train.iter().chain(validation).any(|s| s.patch.dims() != (size, size)) {
        return Err(Error::Precondition("all patches must be square and of one size".into()));
    }
    let (xs, ts) = char_targets(train, charset)?;
    let (vx, vt) = char_targets(validation, charset)?;
    let arch = Architecture::CharCnn {
        cnn: cfg.cnn.clone(),
        patch_size: size,
        charset: charset.as_string(),
    };
    let mut net = build_cnn::<f32>(&cfg.cnn, size, size, charset.len(), derive_seed(cfg.seed, 10));
    let mut last_good = ModelCheckpoint::new(arch.clone(), meta(cfg, charset, &[], 0, (size, size)));
    last_good.store(&net);
    let fitted = fit(
        &mut net,
        (size, size),
        &xs,
        &ts,
        charset.len(),
        Some((&vx, &vt)),
        cfg,
        &mut |net, history, steps| {
            last_good = ModelCheckpoint::new(arch.clone(), meta(cfg, charset, history, steps, (size, size)));
            last_good.store(net);
            Ok(())
        },
    )?;
    if let Some(out) = out {
        last_good.save(out)?;
    }
    if let Some((epoch, detail)) = fitted.diverged {
        return Err(Error::Divergence { epoch, detail });
    }
    debug_assert_eq!(last_good.training_meta.optimizer_steps["cnn"], fitted.steps);
    Ok(last_good)
}

/// Loaded character classifier.
#[derive(Debug, Clone)]
pub struct CharClassifier {
    pub net: Sequential<f32>,
    pub charset: Charset,
    pub patch_size: usize,
}

impl CharClassifier {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let Architecture::CharCnn { cnn, patch_size, charset } = &ckpt.architecture else {
            return Err(Error::contract(format!(
                "checkpoint holds a {} model, not a character CNN",
                ckpt.architecture.kind()
            )));
        };
        let charset = Charset::new(charset)?;
        let mut net = build_cnn::<f32>(cnn, *patch_size, *patch_size, charset.len(), 0);
        ckpt.restore(&mut net)?;
        Ok(Self {
            net,
            charset,
            patch_size: *patch_size,
        })
    }

    pub fn logits(&self, patches: &[&CaptchaImage]) -> Result<Tensor<f32>> {
        for p in patches {
            if p.channels() != 1 || p.dims() != (self.patch_size, self.patch_size) {
                return Err(Error::contract(format!(
                    "patch must be single-channel {0}x{0}, got {1}x{2}x{3}",
                    self.patch_size,
                    p.width(),
                    p.height(),
                    p.channels()
                )));
            }
        }
        if patches.is_empty() {
            return Ok(Tensor::zeros([0, self.charset.len(), 1, 1]));
        }
        Ok(self.net.forward(&stack(patches)))
    }

    pub fn classify_batch(&self, patches: &[&CaptchaImage]) -> Result<Vec<CharDistribution>> {
        let logits = self.logits(patches)?;
        let raw: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
        let probs = softmax_rows(&raw, self.charset.len());
        probs
            .chunks_exact(self.charset.len())
            .map(|p| CharDistribution::new(self.charset.chars().to_vec(), p.to_vec()))
            .collect()
    }

    pub fn classify(&self, patch: &CaptchaImage) -> Result<CharDistribution> {
        Ok(self.classify_batch(&[patch])?.remove(0))
    }
}

pub fn classify_char(patch: &CaptchaImage, ckpt: &ModelCheckpoint) -> Result<CharDistribution> {
    CharClassifier::from_checkpoint(ckpt)?.classify(patch)
}

/// Ground-truth character for each region: the glyph whose box overlaps it
/// most. Regions touching no glyph get `None`. Partial and merged glyphs are
/// labeled like whole ones.
pub fn label_regions(regions: &[CharRegion], boxes: &[GlyphBox], label: &str) -> Vec<Option<char>> {
    let chars: Vec<char> = label.chars().collect();
    regions
        .iter()
        .map(|r| {
            let rb = GlyphBox {
                left: r.left,
                top: r.top,
                width: r.width,
                height: r.height,
            };
            let mut best: Option<(usize, usize)> = None;
            for (i, b) in boxes.iter().enumerate().take(chars.len()) {
                let a = rb.intersection(b);
                if a > 0 && best.is_none_or(|(_, ba)| a > ba) {
                    best = Some((i, a));
                }
            }
            best.map(|(i, _)| chars[i])
        })
        .collect()
}

/// Which rendition of a captcha the segmenter sees when building training
/// patches.
#[derive(Debug, Clone, Copy)]
pub enum PatchSource<'a> {
    /// The clean rendering passed through the same residual cleanup the
    /// denoiser ends with.
    Clean,
    /// The noisy image run through a trained denoiser.
    Denoised(&'a GanModel),
    /// The noisy image with classic preprocessing only.
    Preprocessed,
}

/// Classic preprocessing: grayscale, Gaussian smoothing, min-max normalization.
pub fn preprocess(img: &CaptchaImage) -> CaptchaImage {
    let smooth = gaussian_smooth(&grayscale(img), DEFAULT_SMOOTH_SIGMA, DEFAULT_SMOOTH_KERNEL).expect("default kernel is valid");
    normalize(&smooth)
}

pub fn source_image(noisy: &CaptchaImage, clean: Option<&CaptchaImage>, source: PatchSource<'_>) -> Result<CaptchaImage> {
    match source {
        PatchSource::Clean => {
            let clean = clean.ok_or_else(|| Error::Precondition("clean image required".into()))?;
            Ok(residual_cleanup(&grayscale(clean)))
        }
        PatchSource::Denoised(gan) => gan.denoise(noisy),
        PatchSource::Preprocessed => Ok(preprocess(noisy)),
    }
}

/// Segments one captcha and labels each segment by maximal glyph overlap.
/// Blank results and unlabeled segments are skipped.
pub fn char_samples(img: &CaptchaImage, boxes: &[GlyphBox], label: &str, seg: &SegmentationConfig) -> Result<Vec<CharSample>> {
    let segments: Vec<Segment> = match segment(img, seg) {
        Ok(s) => s,
        Err(Error::EmptyCaptcha) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let regions: Vec<CharRegion> = segments.iter().map(|s| s.region).collect();
    Ok(segments
        .into_iter()
        .zip(label_regions(&regions, boxes, label))
        .filter_map(|(s, l)| l.map(|label| CharSample { patch: s.patch, label }))
        .collect())
}

/// Character patches for every entry of one split of a paired manifest.
pub fn manifest_char_samples(
    manifest: &DatasetManifest,
    split: Split,
    source: PatchSource<'_>,
    seg: &SegmentationConfig,
) -> Result<Vec<CharSample>> {
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let noisy = manifest.load_noisy(e)?;
        let clean = match (&e.clean_path, source) {
            (Some(_), PatchSource::Clean) => Some(manifest.load_clean(e)?),
            _ => None,
        };
        let img = source_image(&noisy, clean.as_ref(), source)?;
        let label = manifest.charset.fold_label(&e.label)?;
        out.extend(char_samples(&img, &e.boxes, &label, seg)?);
    }
    Ok(out)
}

/// Image-level baseline: the preprocessed image is resized to `net_size`
/// and classified by `heads` parallel softmax heads.
pub fn train_image_level_baseline(
    train: &[(CaptchaImage, String)],
    validation: &[(CaptchaImage, String)],
    fixed_length: usize,
    charset: &Charset,
    net_size: (usize, usize),
    cfg: &CnnConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if fixed_length < 1 {
        return Err(Error::param("fixed length must be >= 1"));
    }
    let Some((first, _)) = train.first() else {
        return Err(Error::Precondition("no training images".into()));
    };
    let input_size = first.dims();
    let encode_set = |set: &[(CaptchaImage, String)]| -> Result<(Vec<Vec<f32>>, Vec<Vec<usize>>)> {
        let mut xs = Vec::with_capacity(set.len());
        let mut ts = Vec::with_capacity(set.len());
        for (img, label) in set {
            let folded = charset.fold_label(label)?;
            if folded.chars().count() != fixed_length {
                return Err(Error::Precondition(format!(
                    "label {label:?} has {} characters; the image-level model needs exactly {fixed_length}",
                    folded.chars().count()
                )));
            }
            if img.dims() != input_size {
                return Err(Error::Precondition("training images must share one size".into()));
            }
            let mut x = Vec::new();
            encode(&preprocess(img).resize(net_size.0, net_size.1), &mut x);
            xs.push(x);
            ts.push(folded.chars().map(|c| charset.index(c).expect("folded label is in charset")).collect());
        }
        Ok((xs, ts))
    };
    let (xs, ts) = encode_set(train)?;
    let (vx, vt) = encode_set(validation)?;
    let arch = Architecture::ImageCnn {
        cnn: cfg.cnn.clone(),
        input_size,
        net_size,
        heads: fixed_length,
        charset: charset.as_string(),
    };
    let mut net = build_cnn::<f32>(&cfg.cnn, net_size.0, net_size.1, fixed_length * charset.len(), derive_seed(cfg.seed, 10));
    let fitted = fit(&mut net, net_size, &xs, &ts, charset.len(), Some((&vx, &vt)), cfg, &mut |_, _, _| Ok(()))?;
    if let Some((epoch, detail)) = fitted.diverged {
        return Err(Error::Divergence { epoch, detail });
    }
    let mut ck = ModelCheckpoint::new(arch, meta(cfg, charset, &fitted.history, fitted.steps, input_size));
    ck.store(&net);
    Ok(ck)
}

/// Loaded image-level baseline.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    pub net: Sequential<f32>,
    pub charset: Charset,
    pub heads: usize,
    pub input_size: (usize, usize),
    pub net_size: (usize, usize),
}

impl ImageClassifier {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let Architecture::ImageCnn {
            cnn,
            input_size,
            net_size,
            heads,
            charset,
        } = &ckpt.architecture
        else {
            return Err(Error::contract(format!(
                "checkpoint holds a {} model, not an image-level CNN",
                ckpt.architecture.kind()
            )));
        };
        let charset = Charset::new(charset)?;
        let mut net = build_cnn::<f32>(cnn, net_size.0, net_size.1, heads * charset.len(), 0);
        ckpt.restore(&mut net)?;
        Ok(Self {
            net,
            charset,
            heads: *heads,
            input_size: *input_size,
            net_size: *net_size,
        })
    }

    /// Per-head argmax, concatenated. Always `heads` characters long.
    pub fn classify(&self, img: &CaptchaImage) -> Result<String> {
        if img.dims() != self.input_size {
            return Err(Error::contract(format!(
                "image is {}x{}, model expects {}x{}",
                img.width(),
                img.height(),
                self.input_size.0,
                self.input_size.1
            )));
        }
        let x = stack(&[&preprocess(img).resize(self.net_size.0, self.net_size.1)]);
        let logits = self.net.forward(&x);
        let classes = self.charset.len();
        Ok((0..self.heads)
            .map(|h| self.charset.symbol(argmax(&logits.data[h * classes..(h + 1) * classes])))
            .collect())
    }

    /// Rejects images whose true length the fixed head count cannot express.
    pub fn classify_labeled(&self, img: &CaptchaImage, expected_length: usize) -> Result<String> {
        if expected_length != self.heads {
            return Err(Error::Incompatible {
                expected: self.heads,
                actual: expected_length,
            });
        }
        self.classify(img)
    }
}

pub fn classify_image_level(img: &CaptchaImage, ckpt: &ModelCheckpoint) -> Result<String> {
    ImageClassifier::from_checkpoint(ckpt)?.classify(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv2d, Linear};
    use crate::nn::Layer;
    use crate::synth::{synthesize_set, NoiseSpec, StyleSpec};

    fn tiny_cfg(epochs: usize) -> CnnConfig {
        CnnConfig {
            cnn: CnnSpec {
                conv_filters: vec![4, 8],
                kernel: 3,
                fc_sizes: vec![32],
                dropout: 0.0,
            },
            learning_rate: 0.01,
            batch_size: 5,
            epochs,
            seed: 3,
            micro_batch: 5,
        }
    }

    fn patches(n: usize, size: usize, charset: &Charset) -> Vec<CharSample> {
        (0..n)
            .map(|i| {
                let label = charset.symbol(i % charset.len());
                let k = (i % charset.len()) as f32;
                let patch = CaptchaImage::from_fn(size, size, |x, y| {
                    let v = ((x as f32 * (0.3 + 0.1 * k)).sin() * (y as f32 * 0.2 + k).cos() + 1.0) / 2.0;
                    v + 0.02 * ((i * 7 + x * 3 + y) % 5) as f32
                });
                CharSample { patch, label }
            })
            .collect()
    }

    #[test]
    fn one_epoch_two_steps_and_valid_distributions() {
        let cs = Charset::digits();
        let train = patches(10, 16, &cs);
        let ck = train_char_cnn(&train, &[], &cs, &tiny_cfg(1), None).unwrap();
        assert_eq!(ck.training_meta.optimizer_steps["cnn"], 2);
        let model = CharClassifier::from_checkpoint(&ck).unwrap();
        for s in &train[..2] {
            let d = model.classify(&s.patch).unwrap();
            assert_eq!(d.len(), 10);
            assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(d.probabilities.iter().all(|p| p.is_finite() && *p >= 0.0));
            assert_eq!(model.classify(&s.patch).unwrap(), d);
        }
        assert!(matches!(model.classify(&CaptchaImage::filled(8, 8, 0.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn default_charset_support_is_36() {
        let cs = Charset::alnum();
        let cfg = CnnConfig { epochs: 1, ..tiny_cfg(1) };
        let ck = train_char_cnn(&patches(36, 32, &cs), &[], &cs, &cfg, None).unwrap();
        assert_eq!(classify_char(&CaptchaImage::filled(32, 32, 1.0), &ck).unwrap().len(), 36);
    }

    #[test]
    fn label_outside_charset_is_data_error() {
        let cs = Charset::digits();
        let mut train = patches(4, 16, &cs);
        train[1].label = 'Q';
        assert!(matches!(train_char_cnn(&train, &[], &cs, &tiny_cfg(1), None), Err(Error::Data(_))));
    }

    #[test]
    fn memorizes_fifty_samples() {
        let cs = Charset::digits();
        let train = patches(50, 16, &cs);
        let cfg = CnnConfig { batch_size: 10, micro_batch: 10, learning_rate: 0.003, ..tiny_cfg(200) };
        let ck = train_char_cnn(&train, &train, &cs, &cfg, None).unwrap();
        let first_perfect = ck.training_meta.history.iter().find(|r| r.losses["validation_accuracy"] == 1.0);
        assert!(first_perfect.is_some(), "never reached 100%: {:?}", ck.training_meta.final_losses);
    }

    #[test]
    fn training_is_deterministic() {
        let cs = Charset::digits();
        let train = patches(20, 16, &cs);
        let cfg = CnnConfig { cnn: CnnSpec { dropout: 0.5, ..tiny_cfg(1).cnn }, ..tiny_cfg(3) };
        let a = train_char_cnn(&train, &[], &cs, &cfg, None).unwrap();
        let b = train_char_cnn(&train, &[], &cs, &cfg, None).unwrap();
        assert_eq!(a.max_weight_delta(&b), Some(0.0));
    }

    fn micro_objective(net: &Sequential<f64>, x: &Tensor<f64>, t: &[usize]) -> f64 {
        softmax_cross_entropy(&net.forward(x), 3, t).0
    }

    #[test]
    fn micro_cnn_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net: Sequential<f64> = Sequential::new(vec![
            Layer::Conv(Conv2d::new("c", 1, 2, 3, 1, &mut rng)),
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear(Linear::new("f", 128, 3, &mut rng)),
        ]);
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|i| ((i as f64) * 0.37).sin()).collect());
        let t = [1, 2];
        let (logits, tape) = net.forward_train(&x, None);
        let (_, g) = softmax_cross_entropy(&logits, 3, &t);
        net.zero_grad();
        net.backward(tape, g, false);
        let eps = 1e-6;
        let picks = [(0, 0), (0, 7), (0, 15), (1, 1), (2, 0), (2, 100), (2, 255), (2, 383), (3, 0), (3, 2)];
        for (pi, wi) in picks {
            let analytic = net.params()[pi].grad[wi];
            let mut plus = net.clone();
            plus.params_mut()[pi].value[wi] += eps;
            let mut minus = net.clone();
            minus.params_mut()[pi].value[wi] -= eps;
            let fd = (micro_objective(&plus, &x, &t) - micro_objective(&minus, &x, &t)) / (2.0 * eps);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3 || (analytic - fd).abs() < 1e-9, "param {pi}[{wi}]: {analytic} vs {fd}");
        }
    }

    #[test]
    fn argmax_is_stable_under_monotone_rescaling() {
        let cs = Charset::digits();
        let ck = train_char_cnn(&patches(10, 16, &cs), &[], &cs, &tiny_cfg(1), None).unwrap();
        let model = CharClassifier::from_checkpoint(&ck).unwrap();
        let p = patches(3, 16, &cs);
        let logits = model.logits(&[&p[2].patch]).unwrap();
        let raw: Vec<f32> = logits.data.clone();
        let scaled: Vec<f32> = raw.iter().map(|v| 3.0 * v + 1.5).collect();
        assert_eq!(argmax(&raw), argmax(&scaled));
        let probs = softmax_rows(&scaled.iter().map(|&v| v as f64).collect::<Vec<_>>(), 10);
        let d = CharDistribution::new(cs.chars().to_vec(), probs).unwrap();
        assert_eq!(d.argmax().0, model.classify(&p[2].patch).unwrap().argmax().0);
    }

    #[test]
    fn labels_by_maximal_overlap() {
        let boxes = [
            GlyphBox { left: 0, top: 0, width: 10, height: 10 },
            GlyphBox { left: 10, top: 0, width: 10, height: 10 },
        ];
        let r = |left, width| CharRegion { left, top: 0, width, height: 10, source: crate::segment::RegionSource::Merged };
        let labels = label_regions(&[r(0, 8), r(7, 10), r(30, 5)], &boxes, "ab");
        assert_eq!(labels, vec![Some('a'), Some('b'), None]);
    }

    #[test]
    fn image_level_baseline_contracts() {
        let cs = Charset::digits();
        let style = StyleSpec {
            charset: cs.clone(),
            length_range: (4, 4),
            canvas: (48, 20),
            ..StyleSpec::default()
        };
        let set: Vec<(CaptchaImage, String)> = synthesize_set(&style, &NoiseSpec::none(), 6, 1)
            .unwrap()
            .into_iter()
            .map(|s| (s.noisy, s.label))
            .collect();
        let cfg = CnnConfig { epochs: 1, ..tiny_cfg(1) };
        let ck = train_image_level_baseline(&set, &[], 4, &cs, (24, 10), &cfg).unwrap();
        let model = ImageClassifier::from_checkpoint(&ck).unwrap();
        let out = model.classify(&set[0].0).unwrap();
        assert_eq!(out.chars().count(), 4);
        assert_eq!(model.classify(&set[0].0).unwrap(), out);
        assert!(matches!(model.classify_labeled(&set[0].0, 5), Err(Error::Incompatible { expected: 4, actual: 5 })));
        assert!(matches!(model.classify(&CaptchaImage::filled(30, 20, 1.0)), Err(Error::Contract(_))));
        assert!(matches!(train_image_level_baseline(&set, &[], 5, &cs, (24, 10), &cfg), Err(Error::Precondition(_))));
    }
}
