//! The end-to-end solver: denoise, segment, classify each segment, then rank
//! whole-string guesses for a bounded number of attempts.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{residual_cleanup, GanModel};
use crate::image::CaptchaImage;
use crate::nn::ModelCheckpoint;
use crate::ops::grayscale;
use crate::recognize::{preprocess, CharClassifier, CharDistribution};
use crate::segment::{segment, CharRegion, SegmentationConfig, MIN_CONTRAST};
use crate::synth::Charset;

pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

/// A candidate string with its joint probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub text: String,
    pub score: f64,
}

/// Joint probability of `text` under independent per-position
/// distributions, multiplied in position order.
pub fn joint_score(per_char: &[CharDistribution], text: &str) -> Option<f64> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() != per_char.len() {
        return None;
    }
    let mut score = 1.0;
    for (d, c) in per_char.iter().zip(chars) {
        score *= d.get(c)?;
    }
    Some(score)
}

struct Node {
    score: f64,
    text: Vec<usize>,
    ranks: Vec<usize>,
    last: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    /// Max-heap order: higher score first, then the lexicographically
    /// smaller string (in charset order).
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.text.cmp(&self.text))
    }
}

/// The `k` most probable joint strings, best first; equal scores are ordered
/// lexicographically by charset position.
///
/// Best-first search over per-position rank vectors. Each position's symbols
/// are sorted by descending probability (ties in charset order), and a node's
/// successors only advance positions at or after the one its parent advanced,
/// so every rank vector has exactly one parent and is generated once. A
/// child never outranks its parent, which makes the pop order exact.
pub fn enumerate_attempts(per_char: &[CharDistribution], k: usize) -> Result<Vec<Attempt>> {
    if per_char.is_empty() {
        return Err(Error::contract("no character distributions to decode"));
    }
    if k < 1 {
        return Err(Error::param("attempt count must be >= 1"));
    }
    let sorted: Vec<Vec<usize>> = per_char
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&a, &b| d.probabilities[b].total_cmp(&d.probabilities[a]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let score_of = |ranks: &[usize]| -> f64 {
        ranks
            .iter()
            .enumerate()
            .fold(1.0, |s, (p, &r)| s * per_char[p].probabilities[sorted[p][r]])
    };
    let text_of = |ranks: &[usize]| -> Vec<usize> { ranks.iter().enumerate().map(|(p, &r)| sorted[p][r]).collect() };
    let node = |ranks: Vec<usize>, last: usize| Node {
        score: score_of(&ranks),
        text: text_of(&ranks),
        ranks,
        last,
    };

    let mut heap = BinaryHeap::new();
    heap.push(node(vec![0; per_char.len()], 0));
    let mut out = Vec::with_capacity(k);
    while let Some(n) = heap.pop() {
        for p in n.last..per_char.len() {
            if n.ranks[p] + 1 < per_char[p].len() {
                let mut ranks = n.ranks.clone();
                ranks[p] += 1;
                heap.push(node(ranks, p));
            }
        }
        out.push(Attempt {
            text: n.text.iter().enumerate().map(|(p, &i)| per_char[p].symbols[i]).collect(),
            score: n.score,
        });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// How the solver cleans the image before segmentation.
#[derive(Debug, Clone)]
pub enum Denoiser {
    Gan(GanModel),
    /// Grayscale, smoothing and normalization only.
    Preprocess,
}

#[derive(Debug, Clone)]
pub struct SolverBundle {
    pub denoiser: Denoiser,
    pub cnn: CharClassifier,
    pub seg_cfg: SegmentationConfig,
    pub max_attempts: usize,
}

impl SolverBundle {
    pub fn from_checkpoints(gan: &ModelCheckpoint, cnn: &ModelCheckpoint, seg_cfg: SegmentationConfig, max_attempts: usize) -> Result<Self> {
        let bundle = Self {
            denoiser: Denoiser::Gan(GanModel::from_checkpoint(gan)?),
            cnn: CharClassifier::from_checkpoint(cnn)?,
            seg_cfg,
            max_attempts,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempts < 1 {
            return Err(Error::param("max attempts must be >= 1"));
        }
        if self.seg_cfg.patch_size != self.cnn.patch_size {
            return Err(Error::contract(format!(
                "segmenter emits {0}x{0} patches, recognizer expects {1}x{1}",
                self.seg_cfg.patch_size, self.cnn.patch_size
            )));
        }
        Ok(())
    }

    pub fn charset(&self) -> &Charset {
        &self.cnn.charset
    }

    /// Fails unless `charset` is the recognizer's charset.
    pub fn check_charset(&self, charset: &Charset) -> Result<()> {
        if charset != self.charset() {
            return Err(Error::param(format!(
                "charset mismatch: data uses {:?}, recognizer was trained on {:?}",
                charset.as_string(),
                self.charset().as_string()
            )));
        }
        Ok(())
    }

    pub fn denoise(&self, img: &CaptchaImage) -> Result<CaptchaImage> {
        let gray = grayscale(img);
        if contrast(&gray) < MIN_CONTRAST {
            return Err(Error::EmptyCaptcha);
        }
        match &self.denoiser {
            Denoiser::Gan(gan) => {
                let g = gan.generate(&gray)?;
                // Normalization would stretch a near-uniform output into noise.
                if contrast(&g) < MIN_CONTRAST {
                    return Err(Error::EmptyCaptcha);
                }
                Ok(residual_cleanup(&g))
            }
            Denoiser::Preprocess => Ok(preprocess(&gray)),
        }
    }
}

fn contrast(img: &CaptchaImage) -> f32 {
    let px = img.pixels();
    let lo = px.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    hi - lo
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub denoise_ms: f64,
    pub segment_ms: f64,
    pub recognize_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub attempts: Vec<String>,
    pub scores: Vec<f64>,
    pub per_char: Vec<CharDistribution>,
    pub regions: Vec<CharRegion>,
    pub timings: StageTimings,
    /// Why no attempts were produced, when that happens.
    pub diagnostic: Option<String>,
}

impl Prediction {
    pub fn best(&self) -> Option<&str> {
        self.attempts.first().map(String::as_str)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the full pipeline on one captcha. A blank image yields a prediction
/// with no attempts and a diagnostic rather than an error.
pub fn solve(img: &CaptchaImage, bundle: &SolverBundle) -> Result<Prediction> {
    let start = Instant::now();
    let t = Instant::now();
    let denoised = match bundle.denoise(img) {
        Err(Error::EmptyCaptcha) => None,
        other => Some(other?),
    };
    let denoise_ms = ms(t);
    let mut pred = solve_denoised(denoised.as_ref(), bundle)?;
    pred.timings.denoise_ms = denoise_ms;
    pred.timings.total_ms = ms(start);
    Ok(pred)
}

/// The segmentation and recognition half of [`solve`], for callers that
/// already hold the denoised image (`None` when denoising found it blank).
pub fn solve_denoised(denoised: Option<&CaptchaImage>, bundle: &SolverBundle) -> Result<Prediction> {
    let start = Instant::now();
    let mut pred = Prediction::default();
    let t = Instant::now();
    let segments = match denoised.map(|d| segment(d, &bundle.seg_cfg)) {
        None | Some(Err(Error::EmptyCaptcha)) => None,
        Some(other) => Some(other?),
    };
    pred.timings.segment_ms = ms(t);
    let Some(segments) = segments.filter(|s| !s.is_empty()) else {
        pred.diagnostic = Some("no foreground found; the captcha appears blank".into());
        pred.timings.total_ms = ms(start);
        return Ok(pred);
    };
    let t = Instant::now();
    let patches: Vec<&CaptchaImage> = segments.iter().map(|s| &s.patch).collect();
    pred.per_char = bundle.cnn.classify_batch(&patches)?;
    for a in enumerate_attempts(&pred.per_char, bundle.max_attempts)? {
        pred.attempts.push(a.text);
        pred.scores.push(a.score);
    }
    pred.timings.recognize_ms = ms(t);
    pred.regions = segments.iter().map(|s| s.region).collect();
    pred.timings.total_ms = ms(start);
    Ok(pred)
}
