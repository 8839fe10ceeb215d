//! Labeled CAPTCHA synthesis with controllable foreground and background
//! security measures.
//!
//! Every function is a pure function of its inputs and seed.

mod charset;
mod dataset;
mod noise;
mod render;

pub use charset::Charset;
pub use dataset::{build_dataset, DatasetManifest, ManifestEntry, Split};
pub use noise::{apply_background_noise, DensityTier, NoiseCategory, NoiseSpec, DOT_AREA};
pub use render::{render_text, FontId, GlyphBox, RenderedText, StyleSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::CaptchaImage;

/// Default canvas, large enough for seven legible characters.
pub const CANONICAL_SIZE: (usize, usize) = (160, 60);

/// Reduced canvas for CPU-bound experiment runs.
pub const SMALL_SIZE: (usize, usize) = (96, 32);

/// Derives an independent child seed; distinct `stream` values give
/// unrelated sequences.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub noisy: CaptchaImage,
    pub clean: CaptchaImage,
    pub label: String,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Ground-truth glyph boxes in label order.
    pub boxes: Vec<GlyphBox>,
}

/// Draws a label uniformly (length over the range, characters over the
/// charset) and renders the clean/noisy pair.
pub fn synthesize_pair(style: &StyleSpec, noise: &NoiseSpec, seed: u64) -> Result<LabeledSample> {
    style.validate()?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let (lo, hi) = style.length_range;
    let len = rng.random_range(lo..=hi);
    let chars = style.charset.chars();
    let label: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
    let rendered = render_text(&label, style, derive_seed(seed, 1))?;
    let noisy = apply_background_noise(&rendered.image, noise, derive_seed(seed, 2))?;
    Ok(LabeledSample {
        noisy,
        clean: rendered.image,
        label,
        noise: noise.clone(),
        seed,
        boxes: rendered.boxes,
    })
}

/// Synthesizes `count` samples whose seeds are derived from `seed` and the
/// sample index.
pub fn synthesize_set(style: &StyleSpec, noise: &NoiseSpec, count: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    (0..count)
        .map(|i| synthesize_pair(style, noise, derive_seed(seed, 1_000 + i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_style() -> StyleSpec {
        StyleSpec {
            canvas: SMALL_SIZE,
            ..StyleSpec::default()
        }
    }

    #[test]
    fn collapsed_range_gives_fixed_length_digits() {
        let style = StyleSpec {
            charset: Charset::digits(),
            length_range: (4, 4),
            ..small_style()
        };
        let s = synthesize_pair(&style, &NoiseSpec::category(NoiseCategory::Dots), 5).unwrap();
        assert_eq!(s.label.chars().count(), 4);
        assert!(s.label.chars().all(|c| c.is_ascii_digit()));
        assert_eq!(s.noisy.dims(), s.clean.dims());
        let again = synthesize_pair(&style, &NoiseSpec::category(NoiseCategory::Dots), 5).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
