//! Conditional GAN background denoiser.
//!
//! The generator maps a grayscale noisy CAPTCHA to a clean-background
//! version; the discriminator scores a (candidate, original) channel pair
//! with the probability that the candidate is a genuinely clean image.
//! [`denoise`] chains the generator with residual cleanup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CaptchaImage;
use crate::nn::loss::{bce_with_logits, sigmoid, softplus};
use crate::nn::{
    build_discriminator, build_generator, Adam, AdamConfig, Architecture, EpochRecord, ModelCheckpoint, Real,
    Sequential, Tensor, TrainingMeta,
};
pub use crate::nn::{DiscriminatorSpec, GeneratorSpec};
use crate::ops::{gaussian_smooth, grayscale, normalize, ssim, DEFAULT_SMOOTH_KERNEL, DEFAULT_SMOOTH_SIGMA};
use crate::synth::{DatasetManifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    /// Use `-log D(G(y))` for the generator's adversarial term instead of
    /// `log(1 - D(G(y)))`.
    pub non_saturating: bool,
    /// Write the checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: Option<usize>,
    /// Stop when validation SSIM has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    /// Samples per forward/backward chunk; bounds memory, not the update size.
    pub micro_batch: usize,
    /// Train on random `(width, height)` crops of each pair instead of whole
    /// images. Both networks are size-agnostic, so inference still runs on
    /// whole images.
    pub crop: Option<(usize, usize)>,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0035,
            batch_size: 200,
            epochs: 1000,
            lambda_rec: 1.0,
            lambda_adv: 1.0,
            seed: 0,
            non_saturating: false,
            checkpoint_every: None,
            early_stop_patience: None,
            micro_batch: 16,
            crop: None,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be > 0"));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.micro_batch < 1 {
            return Err(Error::param("batch size, epochs and micro batch must be >= 1"));
        }
        if self.lambda_rec < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::param("loss weights must be >= 0"));
        }
        if self.generator.filters.last() != Some(&1) {
            return Err(Error::param("generator must end in a single output channel"));
        }
        if self.generator.kernel % 2 == 0 || self.discriminator.kernel % 2 == 0 {
            return Err(Error::param("kernels must be odd"));
        }
        Ok(())
    }
}

/// Per-sample `log(1 - D)` from discriminator logits. The generator's
/// adversarial loss and the discriminator's fake-sample term are both built
/// from this one computation.
pub fn fake_log_terms(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| -softplus(z)).collect()
}

/// Per-sample `log D` from discriminator logits.
pub fn real_log_terms(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| -softplus(-z)).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Generator adversarial loss (minimized).
pub fn generator_adversarial_loss(fake_logits: &[f64], non_saturating: bool) -> f64 {
    if non_saturating {
        -mean(&real_log_terms(fake_logits))
    } else {
        mean(&fake_log_terms(fake_logits))
    }
}

/// The discriminator's value `(1/N) Σ [log D(x) + log(1 - D(G(y)))]`,
/// returned as its real and fake parts. Training ascends their sum.
pub fn discriminator_value(real_logits: &[f64], fake_logits: &[f64]) -> (f64, f64) {
    (mean(&real_log_terms(real_logits)), mean(&fake_log_terms(fake_logits)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub adversarial: f64,
    pub reconstruction: f64,
    pub total: f64,
}

pub fn sigmoid_tensor<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(z.shape, z.data.iter().map(|v| T::of(sigmoid(v.f64()))).collect())
}

/// Accumulates gradients of the generator objective for one chunk into the
/// generator's parameters. `scale` is the chunk's share of the batch.
/// The discriminator's parameter gradients are polluted and must be cleared
/// by the caller. Returns the chunk losses and the generated images.
#[allow(clippy::too_many_arguments)]
pub fn generator_chunk_grads<T: Real>(
    g: &mut Sequential<T>,
    d: &mut Sequential<T>,
    noisy: &Tensor<T>,
    clean: &Tensor<T>,
    lambda_rec: f64,
    lambda_adv: f64,
    non_saturating: bool,
    scale: f64,
) -> (StepLosses, Tensor<T>) {
    let (z, g_tape) = g.forward_train(noisy, None);
    let fake = sigmoid_tensor(&z);
    let (rec, mut dz) = bce_with_logits(&z, &clean.data);
    dz.data.iter_mut().for_each(|v| *v *= T::of(lambda_rec * scale));

    let mut adversarial = 0.0;
    if lambda_adv > 0.0 {
        let pair = Tensor::concat_channels(&fake, noisy);
        let (dl, d_tape) = d.forward_train(&pair, None);
        let logits: Vec<f64> = dl.data.iter().map(|v| v.f64()).collect();
        adversarial = generator_adversarial_loss(&logits, non_saturating);
        let n = logits.len() as f64;
        let grad: Vec<T> = logits
            .iter()
            .map(|&l| {
                let s = sigmoid(l);
                let g = if non_saturating { s - 1.0 } else { -s };
                T::of(g / n * lambda_adv * scale)
            })
            .collect();
        let dpair = d
            .backward(d_tape, Tensor::from_vec(dl.shape, grad), true)
            .expect("input gradient requested");
        let (dfake, _) = dpair.split_channels(1);
        for ((acc, g), f) in dz.data.iter_mut().zip(&dfake.data).zip(&fake.data) {
            *acc += *g * *f * (T::one() - *f);
        }
    }
    g.backward(g_tape, dz, false);
    let losses = StepLosses {
        adversarial,
        reconstruction: rec,
        total: lambda_adv * adversarial + lambda_rec * rec,
    };
    (losses, fake)
}

/// Accumulates gradients of the discriminator loss `-(value)` for one chunk
/// and returns that loss.
pub fn discriminator_chunk_grads<T: Real>(
    d: &mut Sequential<T>,
    fake: &Tensor<T>,
    noisy: &Tensor<T>,
    clean: &Tensor<T>,
    scale: f64,
) -> f64 {
    let n = noisy.n() as f64;
    let (real_logits, real_tape) = d.forward_train(&Tensor::concat_channels(clean, noisy), None);
    let rl: Vec<f64> = real_logits.data.iter().map(|v| v.f64()).collect();
    let grad: Vec<T> = rl.iter().map(|&l| T::of((sigmoid(l) - 1.0) / n * scale)).collect();
    d.backward(real_tape, Tensor::from_vec(real_logits.shape, grad), false);

    let (fake_logits, fake_tape) = d.forward_train(&Tensor::concat_channels(fake, noisy), None);
    let fl: Vec<f64> = fake_logits.data.iter().map(|v| v.f64()).collect();
    let grad: Vec<T> = fl.iter().map(|&l| T::of(sigmoid(l) / n * scale)).collect();
    d.backward(fake_tape, Tensor::from_vec(fake_logits.shape, grad), false);

    let (r, f) = discriminator_value(&rl, &fl);
    -(r + f)
}

/// Generator objective evaluated without touching gradients (for checks).
pub fn generator_objective<T: Real>(
    g: &Sequential<T>,
    d: &Sequential<T>,
    noisy: &Tensor<T>,
    clean: &Tensor<T>,
    lambda_rec: f64,
    lambda_adv: f64,
    non_saturating: bool,
) -> f64 {
    let z = g.forward(noisy);
    let (rec, _) = bce_with_logits(&z, &clean.data);
    let dl = d.forward(&Tensor::concat_channels(&sigmoid_tensor(&z), noisy));
    let logits: Vec<f64> = dl.data.iter().map(|v| v.f64()).collect();
    lambda_rec * rec + lambda_adv * generator_adversarial_loss(&logits, non_saturating)
}

/// Discriminator loss (negated value) evaluated without touching gradients.
pub fn discriminator_objective<T: Real>(d: &Sequential<T>, fake: &Tensor<T>, noisy: &Tensor<T>, clean: &Tensor<T>) -> f64 {
    let rl: Vec<f64> = d.forward(&Tensor::concat_channels(clean, noisy)).data.iter().map(|v| v.f64()).collect();
    let fl: Vec<f64> = d.forward(&Tensor::concat_channels(fake, noisy)).data.iter().map(|v| v.f64()).collect();
    let (r, f) = discriminator_value(&rl, &fl);
    -(r + f)
}

/// Loaded generator and discriminator, ready for inference.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub generator: Sequential<f32>,
    pub discriminator: Sequential<f32>,
    /// `(width, height)` the model was trained at.
    pub input_size: (usize, usize),
}

impl GanModel {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let Architecture::Gan {
            generator,
            discriminator,
            input_size,
        } = &ckpt.architecture
        else {
            return Err(Error::contract(format!(
                "checkpoint holds a {} model, not a GAN",
                ckpt.architecture.kind()
            )));
        };
        let mut g = build_generator::<f32>(generator, 0);
        let mut d = build_discriminator::<f32>(discriminator, 0);
        ckpt.restore(&mut g)?;
        ckpt.restore(&mut d)?;
        Ok(Self {
            generator: g,
            discriminator: d,
            input_size: *input_size,
        })
    }

    fn check_input(&self, img: &CaptchaImage, what: &str) -> Result<()> {
        if img.channels() != 1 {
            return Err(Error::contract(format!("{what} must be single-channel")));
        }
        if img.dims() != self.input_size {
            return Err(Error::contract(format!(
                "{what} is {}x{}, model expects {}x{}",
                img.width(),
                img.height(),
                self.input_size.0,
                self.input_size.1
            )));
        }
        Ok(())
    }

    pub fn generate(&self, noisy: &CaptchaImage) -> Result<CaptchaImage> {
        self.check_input(noisy, "generator input")?;
        let z = self.generator.forward(&image_tensor(noisy));
        let pixels = z.data.iter().map(|&v| sigmoid(v as f64) as f32).collect();
        Ok(CaptchaImage::from_clamped(noisy.width(), noisy.height(), 1, pixels))
    }

    pub fn discriminate(&self, candidate: &CaptchaImage, original: &CaptchaImage) -> Result<f64> {
        self.check_input(candidate, "candidate")?;
        self.check_input(original, "original")?;
        let pair = Tensor::concat_channels(&image_tensor(candidate), &image_tensor(original));
        let z = self.discriminator.forward(&pair).data[0] as f64;
        Ok(sigmoid(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    /// Grayscale, generator, Gaussian smoothing, min-max normalization.
    pub fn denoise(&self, noisy: &CaptchaImage) -> Result<CaptchaImage> {
        let g = self.generate(&grayscale(noisy))?;
        Ok(residual_cleanup(&g))
    }
}

/// Residual noise removal applied after the generator.
pub fn residual_cleanup(img: &CaptchaImage) -> CaptchaImage {
    let smooth = gaussian_smooth(img, DEFAULT_SMOOTH_SIGMA, DEFAULT_SMOOTH_KERNEL).expect("default kernel is valid");
    normalize(&smooth)
}

pub fn generator_forward(noisy: &CaptchaImage, ckpt: &ModelCheckpoint) -> Result<CaptchaImage> {
    GanModel::from_checkpoint(ckpt)?.generate(noisy)
}

pub fn discriminator_forward(candidate: &CaptchaImage, original: &CaptchaImage, ckpt: &ModelCheckpoint) -> Result<f64> {
    GanModel::from_checkpoint(ckpt)?.discriminate(candidate, original)
}

pub fn denoise(noisy: &CaptchaImage, ckpt: &ModelCheckpoint) -> Result<CaptchaImage> {
    GanModel::from_checkpoint(ckpt)?.denoise(noisy)
}

fn image_tensor<T: Real>(img: &CaptchaImage) -> Tensor<T> {
    Tensor::from_vec(
        [1, 1, img.height(), img.width()],
        img.pixels().iter().map(|&v| T::of(v as f64)).collect(),
    )
}

fn stack<T: Real>(imgs: &[&CaptchaImage]) -> Tensor<T> {
    let (w, h) = imgs[0].dims();
    let mut data = Vec::with_capacity(imgs.len() * w * h);
    for img in imgs {
        data.extend(img.pixels().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec([imgs.len(), 1, h, w], data)
}

/// A grayscale (noisy, clean) training pair.
#[derive(Debug, Clone)]
pub struct GanPair {
    pub noisy: CaptchaImage,
    pub clean: CaptchaImage,
}

impl GanPair {
    pub fn new(noisy: &CaptchaImage, clean: &CaptchaImage) -> Result<Self> {
        if !noisy.same_dims(clean) {
            return Err(Error::Precondition("noisy and clean images differ in size".into()));
        }
        Ok(Self {
            noisy: grayscale(noisy),
            clean: grayscale(clean),
        })
    }
}

/// Loads the training split of a paired manifest.
pub fn load_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<GanPair>> {
    manifest
        .split(split)
        .map(|e| {
            if e.clean_path.is_none() {
                return Err(Error::Precondition(format!(
                    "entry {} has no clean counterpart; GAN training needs paired data",
                    e.image_path
                )));
            }
            GanPair::new(&manifest.load_noisy(e)?, &manifest.load_clean(e)?)
        })
        .collect()
}

/// Training extras beyond the config.
#[derive(Debug, Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint destination; written every `checkpoint_every` epochs, at
    /// completion, and with the last good weights on divergence.
    pub out: Option<PathBuf>,
    /// Held-out pairs for early stopping.
    pub validation: Option<&'a [GanPair]>,
    /// Recorded verbatim in the checkpoint metadata.
    pub run_config: Option<serde_json::Value>,
}

pub fn train_gan(train: &DatasetManifest, config: &GanConfig, out: Option<&Path>) -> Result<ModelCheckpoint> {
    let pairs = load_pairs(train, Split::Train)?;
    train_gan_pairs(
        &pairs,
        config,
        TrainOptions {
            out: out.map(Path::to_path_buf),
            ..Default::default()
        },
    )
}

struct State {
    g: Sequential<f32>,
    d: Sequential<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
}

fn snapshot(
    state: &State,
    config: &GanConfig,
    size: (usize, usize),
    history: &[EpochRecord],
    run_config: &Option<serde_json::Value>,
) -> ModelCheckpoint {
    let mut config_json = serde_json::to_value(config).expect("config serializes");
    if let Some(rc) = run_config {
        config_json = serde_json::json!({ "gan": config_json, "run": rc });
    }
    let mut ck = ModelCheckpoint::new(
        Architecture::Gan {
            generator: config.generator.clone(),
            discriminator: config.discriminator.clone(),
            input_size: size,
        },
        TrainingMeta {
            config: config_json,
            epochs_completed: history.len(),
            final_losses: history.last().map(|r| r.losses.clone()).unwrap_or_default(),
            history: history.to_vec(),
            optimizer_steps: BTreeMap::from([
                ("generator".to_string(), state.opt_g.steps()),
                ("discriminator".to_string(), state.opt_d.steps()),
            ]),
            seed: config.seed,
            charset: None,
            canonical_size: size,
            note: None,
        },
    );
    ck.store(&state.g);
    ck.store(&state.d);
    ck
}

/// Adversarial training over in-memory pairs.
///
/// Each batch first updates the generator on the weighted sum of pixel BCE
/// and the adversarial term, then updates the discriminator on real pairs
/// and the batch's (detached) generated images.
pub fn train_gan_pairs(pairs: &[GanPair], config: &GanConfig, opts: TrainOptions<'_>) -> Result<ModelCheckpoint> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let size = pairs[0].noisy.dims();
    if pairs.iter().any(|p| p.noisy.dims() != size || p.clean.dims() != size) {
        return Err(Error::Precondition("training pairs must share one size".into()));
    }
    let mut state = State {
        g: build_generator(&config.generator, crate::synth::derive_seed(config.seed, 1)),
        d: build_discriminator(&config.discriminator, crate::synth::derive_seed(config.seed, 2)),
        opt_g: Adam::new(AdamConfig::with_lr(config.learning_rate)),
        opt_d: Adam::new(AdamConfig::with_lr(config.learning_rate)),
    };
    if let Some((cw, ch)) = config.crop {
        if cw == 0 || ch == 0 || cw > size.0 || ch > size.1 {
            return Err(Error::param(format!("crop {cw}x{ch} does not fit {}x{} images", size.0, size.1)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(config.seed, 3));
    let mut crop_rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(config.seed, 4));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut last_good = snapshot(&state, config, size, &history, &opts.run_config);
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len() as f64;
            let mut fakes = Vec::new();
            let mut step = StepLosses::default();
            for chunk in batch.chunks(config.micro_batch) {
                let (noisy, clean) = match config.crop {
                    None => (
                        stack::<f32>(&chunk.iter().map(|&i| &pairs[i].noisy).collect::<Vec<_>>()),
                        stack::<f32>(&chunk.iter().map(|&i| &pairs[i].clean).collect::<Vec<_>>()),
                    ),
                    Some((cw, ch)) => {
                        let mut ns = Vec::with_capacity(chunk.len());
                        let mut cs = Vec::with_capacity(chunk.len());
                        for &i in chunk {
                            let x = crop_rng.random_range(0..=size.0 - cw);
                            let y = crop_rng.random_range(0..=size.1 - ch);
                            ns.push(pairs[i].noisy.crop(x, y, cw, ch)?);
                            cs.push(pairs[i].clean.crop(x, y, cw, ch)?);
                        }
                        (stack::<f32>(&ns.iter().collect::<Vec<_>>()), stack::<f32>(&cs.iter().collect::<Vec<_>>()))
                    }
                };
                let share = chunk.len() as f64 / b;
                let (l, fake) = generator_chunk_grads(
                    &mut state.g,
                    &mut state.d,
                    &noisy,
                    &clean,
                    config.lambda_rec,
                    config.lambda_adv,
                    config.non_saturating,
                    share,
                );
                step.adversarial += l.adversarial * share;
                step.reconstruction += l.reconstruction * share;
                step.total += l.total * share;
                fakes.push((fake, noisy, clean));
            }
            state.d.zero_grad();
            state.opt_g.step(state.g.params_mut());

            let mut d_loss = 0.0;
            for (fake, noisy, clean) in &fakes {
                let share = noisy.n() as f64 / b;
                d_loss += share * discriminator_chunk_grads(&mut state.d, fake, noisy, clean, share);
            }
            state.opt_d.step(state.d.params_mut());

            sums[0] += d_loss;
            sums[1] += step.adversarial;
            sums[2] += step.reconstruction;
            sums[3] += step.total;
            batches += 1;
        }
        let n = batches as f64;
        let losses = BTreeMap::from([
            ("discriminator".to_string(), sums[0] / n),
            ("generator_adversarial".to_string(), sums[1] / n),
            ("generator_reconstruction".to_string(), sums[2] / n),
            ("generator_total".to_string(), sums[3] / n),
        ]);
        if losses.values().any(|v| !v.is_finite()) {
            if let Some(out) = &opts.out {
                last_good.save(out)?;
            }
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite loss {losses:?}; last good checkpoint has {} epochs", last_good.training_meta.epochs_completed),
            });
        }
        log::info!(
            "gan epoch {epoch}/{}: d {:.4} g_adv {:.4} g_rec {:.4}",
            config.epochs,
            losses["discriminator"],
            losses["generator_adversarial"],
            losses["generator_reconstruction"]
        );
        let mut record = EpochRecord { epoch, losses };

        let mut stop = false;
        if let (Some(patience), Some(val)) = (config.early_stop_patience, opts.validation) {
            let model = GanModel {
                generator: state.g.clone(),
                discriminator: state.d.clone(),
                input_size: size,
            };
            let mut total = 0.0;
            for p in val {
                total += ssim(&model.generate(&p.noisy)?, &p.clean)?;
            }
            let score = total / val.len().max(1) as f64;
            record.losses.insert("validation_ssim".into(), score);
            if score > best_val {
                best_val = score;
                since_best = 0;
            } else {
                since_best += 1;
                stop = since_best >= patience;
            }
        }
        history.push(record);
        last_good = snapshot(&state, config, size, &history, &opts.run_config);
        if let (Some(k), Some(out)) = (config.checkpoint_every, &opts.out) {
            if k > 0 && epoch % k == 0 {
                last_good.save(out)?;
            }
        }
        if stop {
            log::info!("gan early stop at epoch {epoch}");
            break;
        }
    }
    if let Some(out) = &opts.out {
        last_good.save(out)?;
    }
    Ok(last_good)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_set, NoiseCategory, NoiseSpec, StyleSpec};

    fn micro_specs() -> (GeneratorSpec, DiscriminatorSpec) {
        (
            GeneratorSpec { filters: vec![3, 1], kernel: 3 },
            DiscriminatorSpec {
                filters: vec![2, 3],
                ..Default::default()
            },
        )
    }

    fn toy_tensors(n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let noisy: Vec<f64> = (0..n * 64).map(|i| 0.5 + 0.45 * ((i as f64) * 0.73).sin()).collect();
        let clean: Vec<f64> = noisy.iter().map(|v| if *v > 0.6 { 1.0 } else { 0.05 }).collect();
        (Tensor::from_vec([n, 1, 8, 8], noisy), Tensor::from_vec([n, 1, 8, 8], clean))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn check_generator_grads(non_saturating: bool) {
        let (gs, ds) = micro_specs();
        let mut g = build_generator::<f64>(&gs, 5);
        let mut d = build_discriminator::<f64>(&ds, 6);
        let (noisy, clean) = toy_tensors(2);
        generator_chunk_grads(&mut g, &mut d, &noisy, &clean, 1.0, 1.0, non_saturating, 1.0);
        let n_params = g.params().len();
        let mut checked = 0;
        for pi in 0..n_params {
            let len = g.params()[pi].value.len();
            for &k in &[0, len / 2, len - 1] {
                let analytic = g.params()[pi].grad[k];
                let h = 1e-5;
                let mut gp = g.clone();
                gp.params_mut()[pi].value[k] += h;
                let mut gm = g.clone();
                gm.params_mut()[pi].value[k] -= h;
                let fd = (generator_objective(&gp, &d, &noisy, &clean, 1.0, 1.0, non_saturating)
                    - generator_objective(&gm, &d, &noisy, &clean, 1.0, 1.0, non_saturating))
                    / (2.0 * h);
                assert!(rel_err(analytic, fd) < 1e-3, "param {pi}[{k}]: {analytic} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        check_generator_grads(false);
        check_generator_grads(true);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let (gs, ds) = micro_specs();
        let g = build_generator::<f64>(&gs, 5);
        let mut d = build_discriminator::<f64>(&ds, 6);
        let (noisy, clean) = toy_tensors(3);
        let fake = sigmoid_tensor(&g.forward(&noisy));
        discriminator_chunk_grads(&mut d, &fake, &noisy, &clean, 1.0);
        let mut checked = 0;
        for pi in 0..d.params().len() {
            let len = d.params()[pi].value.len();
            for &k in &[0, len - 1] {
                let analytic = d.params()[pi].grad[k];
                let h = 1e-5;
                let mut dp = d.clone();
                dp.params_mut()[pi].value[k] += h;
                let mut dm = d.clone();
                dm.params_mut()[pi].value[k] -= h;
                let fd = (discriminator_objective(&dp, &fake, &noisy, &clean)
                    - discriminator_objective(&dm, &fake, &noisy, &clean))
                    / (2.0 * h);
                assert!(rel_err(analytic, fd) < 1e-3, "param {pi}[{k}]: {analytic} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn adversarial_term_is_negated_fake_term() {
        let logits = [-3.2, 0.0, 0.7, 12.5, -40.0];
        let g_adv = generator_adversarial_loss(&logits, false);
        let (_, fake_part) = discriminator_value(&[0.0], &logits);
        // The discriminator minimizes -(real + fake).
        let d_fake_loss = -fake_part;
        assert!((g_adv + d_fake_loss).abs() < 1e-12);
    }

    fn toy_pairs(n: usize, seed: u64) -> Vec<GanPair> {
        let style = StyleSpec {
            canvas: (24, 12),
            length_range: (1, 2),
            ..StyleSpec::default()
        };
        synthesize_set(&style, &NoiseSpec::category(NoiseCategory::Dots), n, seed)
            .unwrap()
            .iter()
            .map(|s| GanPair::new(&s.noisy, &s.clean).unwrap())
            .collect()
    }

    fn tiny_config() -> GanConfig {
        GanConfig {
            learning_rate: 0.003,
            batch_size: 2,
            epochs: 1,
            micro_batch: 2,
            generator: GeneratorSpec { filters: vec![4, 1], kernel: 3 },
            discriminator: DiscriminatorSpec {
                filters: vec![2, 2],
                ..Default::default()
            },
            ..GanConfig::default()
        }
    }

    #[test]
    fn update_counts_follow_batches() {
        let pairs = toy_pairs(4, 1);
        let ck = train_gan_pairs(&pairs, &tiny_config(), TrainOptions::default()).unwrap();
        assert_eq!(ck.training_meta.optimizer_steps["generator"], 2);
        assert_eq!(ck.training_meta.optimizer_steps["discriminator"], 2);
        assert_eq!(ck.training_meta.history.len(), 1);
    }

    #[test]
    fn crop_training_runs_and_infers_full_size() {
        let pairs = toy_pairs(4, 6);
        let cfg = GanConfig {
            crop: Some((12, 8)),
            ..tiny_config()
        };
        let ck = train_gan_pairs(&pairs, &cfg, TrainOptions::default()).unwrap();
        let model = GanModel::from_checkpoint(&ck).unwrap();
        assert_eq!(model.input_size, (24, 12));
        assert_eq!(model.generate(&pairs[0].noisy).unwrap().dims(), (24, 12));
        let bad = GanConfig {
            crop: Some((30, 8)),
            ..tiny_config()
        };
        assert!(train_gan_pairs(&pairs, &bad, TrainOptions::default()).is_err());
    }

    #[test]
    fn training_is_reproducible_and_round_trips() {
        let pairs = toy_pairs(4, 2);
        let cfg = GanConfig { epochs: 2, ..tiny_config() };
        let a = train_gan_pairs(&pairs, &cfg, TrainOptions::default()).unwrap();
        let b = train_gan_pairs(&pairs, &cfg, TrainOptions::default()).unwrap();
        assert!(a.max_weight_delta(&b).unwrap() <= 1e-6);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        a.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        let img = &pairs[0].noisy;
        assert_eq!(
            generator_forward(img, &a).unwrap(),
            generator_forward(img, &loaded).unwrap()
        );
    }

    #[test]
    fn inference_contracts() {
        let pairs = toy_pairs(2, 3);
        let ck = train_gan_pairs(&pairs, &tiny_config(), TrainOptions::default()).unwrap();
        let model = GanModel::from_checkpoint(&ck).unwrap();
        let out = model.generate(&pairs[0].noisy).unwrap();
        assert_eq!(out.dims(), (24, 12));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let p = model.discriminate(&pairs[0].clean, &pairs[0].noisy).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, model.discriminate(&pairs[0].clean, &pairs[0].noisy).unwrap());
        assert!(matches!(model.generate(&CaptchaImage::filled(10, 10, 0.5)), Err(Error::Contract(_))));
        let rgb = CaptchaImage::filled_rgb(24, 12, [1.0; 3]);
        assert!(matches!(model.generate(&rgb), Err(Error::Contract(_))));
        assert_eq!(model.denoise(&rgb).unwrap().dims(), (24, 12));
    }

    #[test]
    fn unpaired_or_empty_data_is_rejected() {
        assert!(matches!(
            train_gan_pairs(&[], &tiny_config(), TrainOptions::default()),
            Err(Error::Precondition(_))
        ));
        let bad = GanConfig { learning_rate: 0.0, ..tiny_config() };
        assert!(train_gan_pairs(&toy_pairs(2, 0), &bad, TrainOptions::default()).is_err());
    }

    #[test]
    fn divergence_aborts_and_keeps_last_good() {
        let pairs = toy_pairs(2, 4);
        let cfg = GanConfig {
            learning_rate: 1e30,
            epochs: 20,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("g.ckpt");
        let res = train_gan_pairs(
            &pairs,
            &cfg,
            TrainOptions {
                out: Some(out.clone()),
                ..Default::default()
            },
        );
        match res {
            Err(Error::Divergence { .. }) => {
                let kept = ModelCheckpoint::load(&out).unwrap();
                assert!(kept
                    .weights
                    .values()
                    .all(|w| w.data.iter().all(|v| v.is_finite())));
            }
            Ok(ck) => {
                // Adam's normalized steps can stay finite; then every loss must be finite.
                assert!(ck.training_meta.final_losses.values().all(|v| v.is_finite()));
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn pure_reconstruction_decreases() {
        let pairs = toy_pairs(50, 5);
        let cfg = GanConfig {
            lambda_adv: 0.0,
            learning_rate: 0.002,
            batch_size: 50,
            micro_batch: 50,
            epochs: 50,
            ..tiny_config()
        };
        let ck = train_gan_pairs(&pairs, &cfg, TrainOptions::default()).unwrap();
        let rec: Vec<f64> = ck
            .training_meta
            .history
            .iter()
            .map(|r| r.losses["generator_reconstruction"])
            .collect();
        let decreasing = rec.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing as f64 >= 0.9 * (rec.len() - 1) as f64, "{rec:?}");
        assert!(rec.last().unwrap() < &rec[0]);
    }
}
