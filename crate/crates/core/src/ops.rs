//! Classical image-processing primitives: luminance conversion, Gaussian
//! smoothing, min-max normalization, morphology, thresholding and SSIM.
//!
//! Every function returns a new image of the same dimensions with pixels in
//! `[0, 1]`. Out-of-bounds neighbors are resolved by mirror reflection that
//! does not repeat the edge pixel (`dcb|abcd|cba`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CaptchaImage;

pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

pub const DEFAULT_SMOOTH_SIGMA: f64 = 1.0;
pub const DEFAULT_SMOOTH_KERNEL: usize = 5;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn grayscale(img: &CaptchaImage) -> CaptchaImage {
    if img.channels() == 1 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let pixels = img
        .pixels()
        .chunks_exact(3)
        .map(|p| p[0] * LUMA_WEIGHTS[0] + p[1] * LUMA_WEIGHTS[1] + p[2] * LUMA_WEIGHTS[2])
        .collect();
    CaptchaImage::from_clamped(w, h, 1, pixels)
}

/// Normalized 1-D Gaussian weights of odd length `kernel`.
pub fn gaussian_kernel(sigma: f64, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn gaussian_smooth(img: &CaptchaImage, sigma: f64, kernel: usize) -> Result<CaptchaImage> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::param(format!("gaussian kernel must be odd and >= 3, got {kernel}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let weights = gaussian_kernel(sigma, kernel);
    let r = (kernel / 2) as isize;
    let (w, h) = img.dims();
    let c = img.channels();
    let src = img.pixels();

    // Horizontal pass then vertical pass, accumulated in f64.
    let mut tmp = vec![0f64; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, wt) in weights.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += wt * src[(y * w + xx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0f32; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, wt) in weights.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += wt * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Ok(CaptchaImage::from_clamped(w, h, c, out))
}

/// Min-max rescale onto `[0, 1]`. A constant image maps to all zeros.
pub fn normalize(img: &CaptchaImage) -> CaptchaImage {
    let (lo, hi) = img
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (w, h) = img.dims();
    let c = img.channels();
    if !(hi > lo) {
        return CaptchaImage::from_clamped(w, h, c, vec![0.0; w * h * c]);
    }
    let span = (hi - lo) as f64;
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| (((v - lo) as f64) / span) as f32)
        .collect();
    CaptchaImage::from_clamped(w, h, c, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
}

pub fn morphology(img: &CaptchaImage, op: MorphOp, kernel: usize) -> Result<CaptchaImage> {
    if img.channels() != 1 {
        return Err(Error::param("morphology requires a single-channel image"));
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::param(format!("morphology kernel must be odd, got {kernel}")));
    }
    let r = (kernel / 2) as isize;
    let (w, h) = img.dims();
    let pick = |a: f32, b: f32| match op {
        MorphOp::Erode => a.min(b),
        MorphOp::Dilate => a.max(b),
    };
    let init = match op {
        MorphOp::Erode => f32::INFINITY,
        MorphOp::Dilate => f32::NEG_INFINITY,
    };
    // Separable: a square min/max filter is a row filter followed by a column filter.
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for d in -r..=r {
                acc = pick(acc, img.get(reflect(x as isize + d, w), y));
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for d in -r..=r {
                acc = pick(acc, tmp[reflect(y as isize + d, h) * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    Ok(CaptchaImage::from_clamped(w, h, 1, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Otsu,
    Fixed(f32),
}

/// Otsu threshold computed exactly over the distinct pixel values.
///
/// Returns the midpoint between the two adjacent distinct values whose split
/// maximizes between-class variance. Because the search runs over the value
/// ordering rather than fixed histogram bins, the induced partition does not
/// change under positive affine rescaling of the input.
pub fn otsu_threshold(img: &CaptchaImage) -> f32 {
    let mut values: Vec<f32> = img.pixels().to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for v in values {
        match distinct.last_mut() {
            Some((val, count)) if *val == v as f64 => *count += 1.0,
            _ => distinct.push((v as f64, 1.0)),
        }
    }
    if distinct.len() == 1 {
        return distinct[0].0 as f32;
    }
    let total: f64 = distinct.iter().map(|d| d.1).sum();
    let total_sum: f64 = distinct.iter().map(|d| d.0 * d.1).sum();
    let mut w0 = 0.0;
    let mut s0 = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for i in 0..distinct.len() - 1 {
        w0 += distinct[i].1;
        s0 += distinct[i].0 * distinct[i].1;
        let w1 = total - w0;
        let mu0 = s0 / w0;
        let mu1 = (total_sum - s0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best * (1.0 + 1e-9) {
            best = between;
            best_idx = i;
        }
    }
    ((distinct[best_idx].0 + distinct[best_idx + 1].0) / 2.0) as f32
}

/// Maps every pixel to `{0, 1}`: values strictly above the threshold become 1.
pub fn binarize(img: &CaptchaImage, method: Threshold) -> Result<CaptchaImage> {
    if img.channels() != 1 {
        return Err(Error::param("binarize requires a single-channel image"));
    }
    let t = match method {
        Threshold::Otsu => otsu_threshold(img),
        Threshold::Fixed(t) => t,
    };
    let (w, h) = img.dims();
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| if v > t { 1.0 } else { 0.0 })
        .collect();
    Ok(CaptchaImage::from_clamped(w, h, 1, pixels))
}

pub fn invert(img: &CaptchaImage) -> CaptchaImage {
    let (w, h) = img.dims();
    let pixels = img.pixels().iter().map(|v| 1.0 - v).collect();
    CaptchaImage::from_clamped(w, h, img.channels(), pixels)
}

/// Mean SSIM over all `SSIM_WINDOW`-square windows at stride 1.
///
/// Images smaller than the window use a single window covering the whole image.
pub fn ssim(a: &CaptchaImage, b: &CaptchaImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::param(format!(
            "ssim dimension mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::param("ssim requires single-channel images"));
    }
    let (w, h) = a.dims();
    let ww = SSIM_WINDOW.min(w);
    let wh = SSIM_WINDOW.min(h);
    let n = (ww * wh) as f64;
    let pa = a.pixels();
    let pb = b.pixels();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let va = pa[y * w + x] as f64;
                    let vb = pb[y * w + x] as f64;
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let ma = sa / n;
            let mb = sb / n;
            let var_a = (saa / n - ma * ma).max(0.0);
            let var_b = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_img(w: usize, h: usize, seed: u64) -> CaptchaImage {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        CaptchaImage::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % 1000) as f32 / 999.0
        })
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn grayscale_values() {
        let white = CaptchaImage::filled_rgb(4, 3, [1.0, 1.0, 1.0]);
        assert!(grayscale(&white).pixels().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let red = CaptchaImage::filled_rgb(4, 3, [1.0, 0.0, 0.0]);
        let g = grayscale(&red);
        assert_eq!(g.channels(), 1);
        assert!(g.pixels().iter().all(|&v| (v - 0.299).abs() < 1e-7));
        assert_eq!(grayscale(&g), g);
    }

    #[test]
    fn gaussian_constant_and_impulse() {
        let c = CaptchaImage::filled(9, 6, 0.42);
        let s = gaussian_smooth(&c, 1.0, 5).unwrap();
        assert!(s.pixels().iter().all(|&v| (v - 0.42).abs() < 1e-6));

        // 1-D weights at sigma 1: [e^-1/2, 1, e^-1/2] / (1 + 2 e^-1/2); the 2-D
        // center is the square of the 1-D center weight.
        let center_1d = 1.0 / (1.0 + 2.0 * (-0.5f64).exp());
        let mut imp = CaptchaImage::filled(7, 7, 0.0);
        imp.set(3, 3, 1.0);
        let s = gaussian_smooth(&imp, 1.0, 3).unwrap();
        assert!((s.get(3, 3) as f64 - center_1d * center_1d).abs() < 1e-6);
        assert!((center_1d * center_1d - 0.204_179_6).abs() < 1e-6);
    }

    #[test]
    fn gaussian_preserves_interior_mass() {
        let mut img = CaptchaImage::filled(20, 20, 0.0);
        for y in 8..12 {
            for x in 7..13 {
                img.set(x, y, 0.5 + 0.05 * (x as f32 - 7.0));
            }
        }
        let before: f64 = img.pixels().iter().map(|&v| v as f64).sum();
        let after: f64 = gaussian_smooth(&img, 1.0, 5)
            .unwrap()
            .pixels()
            .iter()
            .map(|&v| v as f64)
            .sum();
        assert!(((after - before) / before).abs() < 1e-6);
    }

    #[test]
    fn gaussian_rejects_even_kernel() {
        let img = CaptchaImage::filled(4, 4, 0.0);
        assert!(matches!(gaussian_smooth(&img, 1.0, 4), Err(Error::Parameter(_))));
        assert!(gaussian_smooth(&img, 1.0, 1).is_err());
    }

    #[test]
    fn gaussian_tiny_sigma_is_near_identity() {
        let img = rand_img(12, 9, 3);
        let s = gaussian_smooth(&img, 0.1, 3).unwrap();
        let max_delta = img
            .pixels()
            .iter()
            .zip(s.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_delta < 0.05);
    }

    #[test]
    fn normalize_cases() {
        let img = CaptchaImage::from_fn(5, 1, |x, _| 0.2 + 0.125 * x as f32);
        let n = normalize(&img);
        let min = n.pixels().iter().cloned().fold(f32::INFINITY, f32::min);
        let max = n.pixels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (0.0, 1.0));
        assert_eq!(normalize(&n), n);
        let flat = normalize(&CaptchaImage::filled(3, 3, 0.5));
        assert!(flat.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn morphology_cases() {
        let mut single = CaptchaImage::filled(9, 9, 0.0);
        single.set(4, 4, 1.0);
        let eroded = morphology(&single, MorphOp::Erode, 3).unwrap();
        assert!(eroded.pixels().iter().all(|&v| v == 0.0));
        let closed = morphology(&morphology(&single, MorphOp::Dilate, 3).unwrap(), MorphOp::Erode, 3).unwrap();
        assert_eq!(closed.get(4, 4), 1.0);

        let mut block = CaptchaImage::filled(10, 10, 0.0);
        for (x, y) in [(4, 4), (5, 4), (4, 5), (5, 5)] {
            block.set(x, y, 1.0);
        }
        let d = morphology(&block, MorphOp::Dilate, 3).unwrap();
        // Brute-force max filter.
        for y in 0..10 {
            for x in 0..10 {
                let mut m = 0.0f32;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                        if (0..10).contains(&xx) && (0..10).contains(&yy) {
                            m = m.max(block.get(xx as usize, yy as usize));
                        }
                    }
                }
                assert_eq!(d.get(x, y), m);
                let inside = (3..=6).contains(&x) && (3..=6).contains(&y);
                assert_eq!(d.get(x, y), if inside { 1.0 } else { 0.0 });
            }
        }

        let rgb = CaptchaImage::filled_rgb(3, 3, [0.0; 3]);
        assert!(morphology(&rgb, MorphOp::Dilate, 3).is_err());
    }

    #[test]
    fn binarize_cases() {
        let bimodal = CaptchaImage::from_fn(10, 4, |x, _| if x < 5 { 0.1 } else { 0.9 });
        let t = otsu_threshold(&bimodal);
        assert!(t > 0.1 && t < 0.9);
        let checker = CaptchaImage::from_fn(6, 6, |x, y| if (x + y) % 2 == 0 { 0.4 } else { 0.6 });
        let b = binarize(&checker, Threshold::Fixed(0.5)).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(b.get(x, y), if (x + y) % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
        let flat = binarize(&CaptchaImage::filled(4, 4, 0.7), Threshold::Otsu).unwrap();
        assert!(flat.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssim_closed_forms() {
        let x = rand_img(20, 12, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let zeros = CaptchaImage::filled(16, 16, 0.0);
        let ones = CaptchaImage::filled(16, 16, 1.0);
        let v = ssim(&zeros, &ones).unwrap();
        // Flat windows: (C1)(C2) / ((1 + C1)(C2)).
        assert!((v - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        assert!(v < 0.01);
        assert!(ssim(&zeros, &CaptchaImage::filled(16, 15, 0.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ssim_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000, w in 8usize..24, h in 8usize..16) {
            let a = rand_img(w, h, sa);
            let b = rand_img(w, h, sb);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn ops_preserve_range_and_dims(seed in 0u64..1000) {
            let img = rand_img(17, 11, seed);
            for out in [
                gaussian_smooth(&img, 1.3, 5).unwrap(),
                normalize(&img),
                morphology(&img, MorphOp::Erode, 3).unwrap(),
                morphology(&img, MorphOp::Dilate, 5).unwrap(),
                binarize(&img, Threshold::Otsu).unwrap(),
            ] {
                prop_assert_eq!(out.dims(), img.dims());
                prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn otsu_partition_invariant_under_affine_rescale(seed in 0u64..1000, a in 0.2f32..1.0, b in 0.0f32..0.5) {
            let img = rand_img(16, 16, seed);
            let b = b.min(1.0 - a);
            let scaled = CaptchaImage::from_fn(16, 16, |x, y| a * img.get(x, y) + b);
            let p1 = binarize(&img, Threshold::Otsu).unwrap();
            let p2 = binarize(&scaled, Threshold::Otsu).unwrap();
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn normalize_idempotent(seed in 0u64..1000) {
            let n = normalize(&rand_img(9, 9, seed));
            prop_assert_eq!(normalize(&n), n);
        }
    }
}
