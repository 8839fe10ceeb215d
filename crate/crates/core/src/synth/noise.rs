//! Background security measures: dot noise, crossing curves and background
//! color change.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CaptchaImage;

/// Pixels covered by one dot (2×2 square).
pub const DOT_AREA: usize = 4;

pub const NORMAL_DOT_DENSITY: f64 = 3.0;
pub const NORMAL_CURVE_COUNT: usize = 2;
pub const NORMAL_CURVE_THICKNESS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityTier {
    Normal,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Dots per 1000 px².
    pub dot_density: f64,
    pub curve_count: usize,
    pub curve_thickness_px: usize,
    pub palette: Vec<[f32; 3]>,
    pub background_color_jitter: bool,
    pub density_tier: DensityTier,
}

/// Mid-luminance noise colors (luminance between 0.3 and 0.45): darker than
/// the background so they survive thresholding, lighter than the glyph
/// palette so glyph pixels stay in the dark class when crossed.
pub fn default_noise_palette() -> Vec<[f32; 3]> {
    vec![
        [0.40, 0.40, 0.40],
        [0.60, 0.30, 0.30],
        [0.30, 0.45, 0.60],
        [0.50, 0.35, 0.20],
        [0.35, 0.45, 0.35],
    ]
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::category(NoiseCategory::DotsCurves)
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::category(NoiseCategory::None)
    }

    pub fn category(cat: NoiseCategory) -> Self {
        let (dots, curves, tier) = match cat {
            NoiseCategory::None => (0.0, 0, DensityTier::Normal),
            NoiseCategory::Dots => (NORMAL_DOT_DENSITY, 0, DensityTier::Normal),
            NoiseCategory::Curves => (0.0, NORMAL_CURVE_COUNT, DensityTier::Normal),
            NoiseCategory::DotsCurves => (NORMAL_DOT_DENSITY, NORMAL_CURVE_COUNT, DensityTier::Normal),
            NoiseCategory::DenseDots => (2.0 * NORMAL_DOT_DENSITY, 0, DensityTier::Dense),
            NoiseCategory::DenseCurves => (0.0, 2 * NORMAL_CURVE_COUNT, DensityTier::Dense),
            NoiseCategory::DenseDotsCurves => (2.0 * NORMAL_DOT_DENSITY, 2 * NORMAL_CURVE_COUNT, DensityTier::Dense),
        };
        Self {
            dot_density: dots,
            curve_count: curves,
            curve_thickness_px: NORMAL_CURVE_THICKNESS,
            palette: default_noise_palette(),
            background_color_jitter: false,
            density_tier: tier,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dot_density == 0.0 && self.curve_count == 0 && !self.background_color_jitter
    }

    /// The dense tier requires each *enabled* measure to be at least twice
    /// its normal default; a measure switched off (zero) is allowed so that
    /// "dense dots" and "dense curves" exist as separate categories.
    pub fn validate(&self) -> Result<()> {
        if !self.dot_density.is_finite() || self.dot_density < 0.0 {
            return Err(Error::param(format!("dot density {} must be >= 0", self.dot_density)));
        }
        if self.curve_thickness_px < 1 {
            return Err(Error::param("curve thickness must be >= 1 px"));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("noise colors must lie in [0, 1]"));
        }
        if self.palette.is_empty() && (self.dot_density > 0.0 || self.curve_count > 0) {
            return Err(Error::param("noise palette is empty"));
        }
        if self.density_tier == DensityTier::Dense {
            if self.dot_density > 0.0 && self.dot_density < 2.0 * NORMAL_DOT_DENSITY {
                return Err(Error::param("dense tier needs dot density >= 2x normal"));
            }
            if self.curve_count > 0 && self.curve_count < 2 * NORMAL_CURVE_COUNT {
                return Err(Error::param("dense tier needs curve count >= 2x normal"));
            }
            if self.dot_density == 0.0 && self.curve_count == 0 {
                return Err(Error::param("dense tier with no noise"));
            }
        }
        Ok(())
    }
}

/// The six noise categories of the SSIM experiment, plus the clean case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCategory {
    None,
    Dots,
    Curves,
    DotsCurves,
    DenseDots,
    DenseCurves,
    DenseDotsCurves,
}

impl NoiseCategory {
    pub const NOISY: [NoiseCategory; 6] = [
        NoiseCategory::Dots,
        NoiseCategory::Curves,
        NoiseCategory::DotsCurves,
        NoiseCategory::DenseDots,
        NoiseCategory::DenseCurves,
        NoiseCategory::DenseDotsCurves,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseCategory::None => "none",
            NoiseCategory::Dots => "dots",
            NoiseCategory::Curves => "curves",
            NoiseCategory::DotsCurves => "dots-curves",
            NoiseCategory::DenseDots => "dense-dots",
            NoiseCategory::DenseCurves => "dense-curves",
            NoiseCategory::DenseDotsCurves => "dense-dots-curves",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(
            self,
            NoiseCategory::DenseDots | NoiseCategory::DenseCurves | NoiseCategory::DenseDotsCurves
        )
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(NoiseCategory::None)
            .chain(NoiseCategory::NOISY)
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::param(format!("unknown noise category {s:?}")))
    }
}

/// Composites background measures onto a clean rendering.
///
/// Background pixels are those exactly white in `clean`. Color jitter
/// recolors them, dots land only on them (behind glyphs), and curves are
/// drawn over everything so they cross the characters.
pub fn apply_background_noise(clean: &CaptchaImage, noise: &NoiseSpec, seed: u64) -> Result<CaptchaImage> {
    noise.validate()?;
    let mut out = if clean.channels() == 3 {
        clean.clone()
    } else {
        let rgb: Vec<f32> = clean.pixels().iter().flat_map(|&v| [v, v, v]).collect();
        CaptchaImage::from_clamped(clean.width(), clean.height(), 3, rgb)
    };
    if noise.is_zero() {
        return Ok(clean.clone());
    }
    let (w, h) = clean.dims();
    let background: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            out.rgb(x, y) == [1.0, 1.0, 1.0]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if noise.background_color_jitter {
        let tint = [
            rng.random_range(0.8..=1.0f32),
            rng.random_range(0.8..=1.0f32),
            rng.random_range(0.8..=1.0f32),
        ];
        for (i, _) in background.iter().enumerate().filter(|(_, b)| **b) {
            out.set_rgb(i % w, i / w, tint);
        }
    }

    let expected = noise.dot_density * (w * h) as f64 / 1000.0;
    let mut dots = expected.floor() as usize;
    if rng.random::<f64>() < expected.fract() {
        dots += 1;
    }
    for _ in 0..dots {
        let x0 = rng.random_range(0..w.saturating_sub(1).max(1));
        let y0 = rng.random_range(0..h.saturating_sub(1).max(1));
        let color = noise.palette[rng.random_range(0..noise.palette.len())];
        for y in y0..(y0 + 2).min(h) {
            for x in x0..(x0 + 2).min(w) {
                if background[y * w + x] {
                    out.set_rgb(x, y, color);
                }
            }
        }
    }

    for _ in 0..noise.curve_count {
        let color = noise.palette[rng.random_range(0..noise.palette.len())];
        let wf = w as f64;
        let hf = h as f64;
        let x0 = rng.random_range(0.0..=0.2 * wf);
        let x3 = rng.random_range((x0 + 0.6 * wf).min(wf - 1.0)..=wf - 1.0);
        let p = [
            (x0, rng.random_range(0.1 * hf..=0.9 * hf)),
            (x0 + (x3 - x0) / 3.0, rng.random_range(-0.2 * hf..=1.2 * hf)),
            (x0 + 2.0 * (x3 - x0) / 3.0, rng.random_range(-0.2 * hf..=1.2 * hf)),
            (x3, rng.random_range(0.1 * hf..=0.9 * hf)),
        ];
        draw_bezier(&mut out, p, noise.curve_thickness_px, color);
    }

    Ok(out)
}

fn draw_bezier(img: &mut CaptchaImage, p: [(f64, f64); 4], thickness: usize, color: [f32; 3]) {
    let (w, h) = img.dims();
    let steps = 4 * (w + h);
    let half = thickness as f64 / 2.0;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let u = 1.0 - t;
        let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        let x = b.iter().zip(&p).map(|(k, q)| k * q.0).sum::<f64>();
        let y = b.iter().zip(&p).map(|(k, q)| k * q.1).sum::<f64>();
        let sx = (x - half + 0.5).floor() as isize;
        let sy = (y - half + 0.5).floor() as isize;
        for yy in sy..sy + thickness as isize {
            for xx in sx..sx + thickness as isize {
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    img.set_rgb(xx as usize, yy as usize, color);
                }
            }
        }
    }
}
