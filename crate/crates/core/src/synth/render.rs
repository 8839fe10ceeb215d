//! Glyph rendering with per-character font, size, rotation and color.

use std::path::PathBuf;
use std::sync::OnceLock;

use ab_glyph::{Font, FontArc, PxScale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Charset, CANONICAL_SIZE};
use crate::error::{Error, Result};
use crate::image::CaptchaImage;

const SANS_BOLD: &[u8] = include_bytes!("../../fonts/DejaVuSans-Bold.ttf");
const SERIF_BOLD: &[u8] = include_bytes!("../../fonts/DejaVuSerif-Bold.ttf");
const MONO_BOLD: &[u8] = include_bytes!("../../fonts/DejaVuSansMono-Bold.ttf");

/// Cap height as a fraction of the em size for the bundled faces.
const CAP_RATIO: f32 = 0.73;

/// A bundled face by name, or a TrueType file on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FontId {
    SansBold,
    SerifBold,
    MonoBold,
    File(PathBuf),
}

impl FontId {
    pub fn bundled() -> Vec<FontId> {
        vec![FontId::SansBold, FontId::SerifBold, FontId::MonoBold]
    }

    fn load(&self) -> Result<FontArc> {
        static BUNDLED: OnceLock<[FontArc; 3]> = OnceLock::new();
        let bundled = BUNDLED.get_or_init(|| {
            [SANS_BOLD, SERIF_BOLD, MONO_BOLD].map(|b| FontArc::try_from_slice(b).expect("bundled font parses"))
        });
        match self {
            FontId::SansBold => Ok(bundled[0].clone()),
            FontId::SerifBold => Ok(bundled[1].clone()),
            FontId::MonoBold => Ok(bundled[2].clone()),
            FontId::File(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::Resource(format!("font {}: {e}", p.display())))?;
                FontArc::try_from_vec(bytes)
                    .map_err(|_| Error::Resource(format!("{} is not a valid TrueType face", p.display())))
            }
        }
    }
}

/// Foreground security measures and canvas geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub charset: Charset,
    /// Inclusive label length bounds.
    pub length_range: (usize, usize),
    pub fonts: Vec<FontId>,
    /// Rotation is drawn uniformly from `[-r, r]` degrees.
    pub rotation_range_deg: f64,
    /// Glyph size varies by up to this many percent either way.
    pub size_jitter_pct: f64,
    pub fg_palette: Vec<[f32; 3]>,
    /// `(width, height)` of the rendered image.
    pub canvas: (usize, usize),
}

impl Default for StyleSpec {
    fn default() -> Self {
        Self {
            charset: Charset::alnum(),
            length_range: (4, 7),
            fonts: FontId::bundled(),
            rotation_range_deg: 25.0,
            size_jitter_pct: 20.0,
            fg_palette: default_fg_palette(),
            canvas: CANONICAL_SIZE,
        }
    }
}

/// Dark glyph colors; every entry has luminance at most 0.25.
pub fn default_fg_palette() -> Vec<[f32; 3]> {
    vec![
        [0.05, 0.05, 0.05],
        [0.10, 0.10, 0.45],
        [0.45, 0.05, 0.05],
        [0.05, 0.30, 0.10],
        [0.25, 0.10, 0.30],
    ]
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            return Err(Error::param(format!("length range {lo}:{hi} must satisfy 1 <= min <= max")));
        }
        if self.fonts.is_empty() {
            return Err(Error::param("style needs at least one font"));
        }
        if self.fg_palette.is_empty() {
            return Err(Error::param("style needs at least one foreground color"));
        }
        if self.fg_palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("foreground colors must lie in [0, 1]"));
        }
        if !(0.0..=90.0).contains(&self.rotation_range_deg) {
            return Err(Error::param("rotation range must be within [0, 90] degrees"));
        }
        if !(0.0..100.0).contains(&self.size_jitter_pct) {
            return Err(Error::param("size jitter must be within [0, 100) percent"));
        }
        let (w, h) = self.canvas;
        if w < 8 || h < 8 {
            return Err(Error::param(format!("canvas {w}x{h} is too small")));
        }
        Ok(())
    }
}

/// Axis-aligned box of one rendered glyph, in canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphBox {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl GlyphBox {
    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn intersection(&self, other: &GlyphBox) -> usize {
        let w = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.top.max(other.top));
        w * h
    }

    pub fn iou(&self, other: &GlyphBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// A clean rendering plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedText {
    /// RGB image on a white background.
    pub image: CaptchaImage,
    /// One box per label character, left edges strictly increasing.
    pub boxes: Vec<GlyphBox>,
    /// Per-pixel glyph coverage in `[0, 1]` (maximum over glyphs).
    pub coverage: Vec<f32>,
}

impl RenderedText {
    /// Pixels covered at least half by a glyph.
    pub fn glyph_mask(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c >= 0.5).collect()
    }
}

/// A rotated glyph coverage mask.
struct Sprite {
    width: usize,
    height: usize,
    cov: Vec<f32>,
}

impl Sprite {
    /// Tight box of pixels with coverage >= 0.5, as (x0, y0, x1, y1) exclusive.
    fn tight(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.cov[y * self.width + x] >= 0.5 {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

fn rasterize(font: &FontArc, c: char, px: f32) -> Result<Sprite> {
    let id = font.glyph_id(c);
    if id.0 == 0 {
        return Err(Error::Resource(format!("font has no glyph for {c:?}")));
    }
    let glyph = id.with_scale_and_position(PxScale::from(px), ab_glyph::point(0.0, 0.0));
    let outlined = font
        .outline_glyph(glyph)
        .ok_or_else(|| Error::Resource(format!("glyph {c:?} has no outline")))?;
    let bounds = outlined.px_bounds();
    let width = bounds.width().ceil() as usize + 1;
    let height = bounds.height().ceil() as usize + 1;
    let mut cov = vec![0f32; width * height];
    outlined.draw(|x, y, v| {
        let (x, y) = (x as usize, y as usize);
        if x < width && y < height {
            cov[y * width + x] = v.clamp(0.0, 1.0);
        }
    });
    Ok(Sprite { width, height, cov })
}

/// Rotates about the center with bilinear sampling into a canvas that holds
/// the whole rotated shape.
fn rotate(s: &Sprite, degrees: f64) -> Sprite {
    if degrees == 0.0 {
        return Sprite {
            width: s.width,
            height: s.height,
            cov: s.cov.clone(),
        };
    }
    let (sin, cos) = (degrees.to_radians() as f32).sin_cos();
    let (w, h) = (s.width as f32, s.height as f32);
    let nw = (w * cos.abs() + h * sin.abs()).ceil() as usize + 2;
    let nh = (w * sin.abs() + h * cos.abs()).ceil() as usize + 2;
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ncx, ncy) = (nw as f32 / 2.0, nh as f32 / 2.0);
    let sample = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x as usize >= s.width || y as usize >= s.height {
            0.0
        } else {
            s.cov[y as usize * s.width + x as usize]
        }
    };
    let mut cov = vec![0f32; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let dx = x as f32 + 0.5 - ncx;
            let dy = y as f32 + 0.5 - ncy;
            // Inverse rotation back into source coordinates.
            let sx = cos * dx + sin * dy + cx - 0.5;
            let sy = -sin * dx + cos * dy + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
            let bot = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
            cov[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    Sprite { width: nw, height: nh, cov }
}

/// Renders `label` on a white canvas. Each glyph gets its own font, size,
/// rotation, color and placement jitter, all drawn from `seed`.
pub fn render_text(label: &str, style: &StyleSpec, seed: u64) -> Result<RenderedText> {
    style.validate()?;
    if label.is_empty() {
        return Err(Error::param("label is empty"));
    }
    let chars = style.charset.fold_label(label)?;
    let chars: Vec<char> = chars.chars().collect();
    let fonts = style.fonts.iter().map(FontId::load).collect::<Result<Vec<_>>>()?;

    let (w, h) = style.canvas;
    let n = chars.len();
    let margin = (w / 40).max(1);
    let cell = (w - 2 * margin) as f32 / n as f32;
    let base_cap = (0.55 * h as f32).min(0.8 * cell);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let jitter = style.size_jitter_pct / 100.0;
    let mut coverage = vec![0f32; w * h];
    let mut pixels = vec![1f32; w * h * 3];
    let mut boxes: Vec<GlyphBox> = Vec::with_capacity(n);

    for (i, &c) in chars.iter().enumerate() {
        let font = &fonts[rng.random_range(0..fonts.len())];
        let scale = 1.0 + rng.random_range(-jitter..=jitter) as f32;
        let angle = rng.random_range(-style.rotation_range_deg..=style.rotation_range_deg);
        let color = style.fg_palette[rng.random_range(0..style.fg_palette.len())];
        let dx = rng.random_range(-0.1..=0.1f32) * cell;
        let dy = rng.random_range(-0.08..=0.08f32) * h as f32;

        let px = (base_cap * scale / CAP_RATIO).max(4.0);
        let sprite = rotate(&rasterize(font, c, px)?, angle);
        let (tx0, ty0, tx1, ty1) = sprite
            .tight()
            .ok_or_else(|| Error::Resource(format!("glyph {c:?} rendered empty")))?;
        let (tw, th) = ((tx1 - tx0) as isize, (ty1 - ty0) as isize);

        // Place the tight box centered on the jittered cell center, clamped inside the canvas.
        let cx = margin as f32 + (i as f32 + 0.5) * cell + dx;
        let cy = h as f32 / 2.0 + dy;
        let mut left = (cx - tw as f32 / 2.0).round() as isize;
        let mut top = (cy - th as f32 / 2.0).round() as isize;
        left = left.clamp(0, (w as isize - tw).max(0));
        top = top.clamp(0, (h as isize - th).max(0));
        if let Some(prev) = boxes.last() {
            if left <= prev.left as isize {
                left = prev.left as isize + 1;
            }
        }
        let ox = left - tx0 as isize;
        let oy = top - ty0 as isize;

        let mut gb: Option<(usize, usize, usize, usize)> = None;
        for sy in 0..sprite.height {
            for sx in 0..sprite.width {
                let a = sprite.cov[sy * sprite.width + sx];
                if a <= 0.0 {
                    continue;
                }
                let (x, y) = (sx as isize + ox, sy as isize + oy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let p = y * w + x;
                for ch in 0..3 {
                    let v = &mut pixels[p * 3 + ch];
                    *v = *v * (1.0 - a) + color[ch] * a;
                }
                coverage[p] = coverage[p].max(a);
                if a >= 0.5 {
                    gb = Some(match gb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        let (x0, y0, x1, y1) = gb.ok_or_else(|| Error::param(format!("glyph {c:?} fell outside the canvas")))?;
        let x0 = match boxes.last() {
            Some(prev) if x0 <= prev.left => prev.left + 1,
            _ => x0,
        };
        boxes.push(GlyphBox {
            left: x0,
            top: y0,
            width: x1.max(x0 + 1) - x0,
            height: y1 - y0,
        });
    }

    Ok(RenderedText {
        image: CaptchaImage::from_clamped(w, h, 3, pixels),
        boxes,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{binarize, grayscale, invert, Threshold};

    #[test]
    fn single_glyph_has_one_box() {
        let r = render_text("A", &StyleSpec::default(), 0).unwrap();
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.image.dims(), CANONICAL_SIZE);
        assert_eq!(r.image.channels(), 3);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = render_text("Mq42", &StyleSpec::default(), 7).unwrap();
        let b = render_text("Mq42", &StyleSpec::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = render_text("Mq42", &StyleSpec::default(), 8).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn digit_boxes_strictly_increase() {
        let style = StyleSpec {
            charset: Charset::digits(),
            length_range: (4, 4),
            ..StyleSpec::default()
        };
        for seed in 0..50 {
            let r = render_text("8041", &style, seed).unwrap();
            assert_eq!(r.boxes.len(), 4);
            for pair in r.boxes.windows(2) {
                assert!(pair[0].left < pair[1].left);
            }
            // Every box is non-empty and inside the canvas.
            for b in &r.boxes {
                assert!(b.width >= 1 && b.height >= 1);
                assert!(b.right() <= 160 && b.bottom() <= 60);
            }
        }
    }

    #[test]
    fn errors() {
        let style = StyleSpec::default();
        assert!(matches!(render_text("A-B", &style, 0), Err(Error::Charset('-'))));
        assert!(render_text("", &style, 0).is_err());
        let missing = StyleSpec {
            fonts: vec![FontId::File("/nonexistent/font.ttf".into())],
            ..StyleSpec::default()
        };
        assert!(matches!(render_text("A", &missing, 0), Err(Error::Resource(_))));
    }

    #[test]
    fn otsu_keeps_glyph_pixels_foreground() {
        let style = StyleSpec::default();
        let mut total = 0usize;
        let mut kept = 0usize;
        for seed in 0..20 {
            let r = render_text("K7W3X", &style, seed).unwrap();
            let ink = invert(&binarize(&grayscale(&r.image), Threshold::Otsu).unwrap());
            for (m, v) in r.glyph_mask().iter().zip(ink.pixels()) {
                if *m {
                    total += 1;
                    kept += (*v == 1.0) as usize;
                }
            }
        }
        assert!(kept as f64 >= 0.99 * total as f64, "{kept}/{total}");
    }

    #[test]
    fn iou_basics() {
        let a = GlyphBox { left: 0, top: 0, width: 10, height: 10 };
        let b = GlyphBox { left: 5, top: 0, width: 10, height: 10 };
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
