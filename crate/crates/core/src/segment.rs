//! Character segmentation: border tracing of connected components, fixed
//! interval splitting, and the merge that turns both into one region per
//! character.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CaptchaImage;
use crate::ops::{binarize, grayscale, invert, Threshold};

pub const DEFAULT_SPECK_AREA: usize = 4;
pub const DEFAULT_PATCH_SIZE: usize = 32;
pub const MAX_INTERVALS: usize = 10;

/// Input contrast below which an image is treated as blank.
pub const MIN_CONTRAST: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    Traced,
    Interval,
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharRegion {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
    pub source: RegionSource,
}

impl CharRegion {
    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    /// Horizontal midpoint, doubled to stay in integers.
    fn mid2(&self) -> usize {
        2 * self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub region: CharRegion,
    pub patch: CaptchaImage,
    pub index: usize,
}

/// Which region finders take part. `Full` is tracing plus intervals; the
/// other two are single-method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMethod {
    Full,
    IntervalOnly,
    TracingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub method: SegMethod,
    /// Components with fewer pixels are discarded as residual noise.
    pub speck_area: usize,
    /// Fixed interval count; estimated per image when absent.
    pub k: Option<usize>,
    pub max_k: usize,
    pub patch_size: usize,
    /// Width/height ratio assumed per character when intervals are used
    /// without tracing and `k` is not fixed.
    pub char_aspect: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            method: SegMethod::Full,
            speck_area: DEFAULT_SPECK_AREA,
            k: None,
            max_k: MAX_INTERVALS,
            patch_size: DEFAULT_PATCH_SIZE,
            char_aspect: 0.8,
        }
    }
}

const DIRS: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn check_binary(img: &CaptchaImage) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::contract("border tracing needs a single-channel image"));
    }
    if img.pixels().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("border tracing needs a binary image (values 0 or 1)"));
    }
    Ok(())
}

/// Follows the outer contour of the component whose first raster-order pixel
/// is `start` (Moore-neighbor tracing) and returns its bounding box as
/// `(x0, y0, x1, y1)` with exclusive ends.
fn trace_contour(fg: &dyn Fn(isize, isize) -> bool, start: (isize, isize), limit: usize) -> (usize, usize, usize, usize) {
    let (sx, sy) = start;
    let mut bbox = (sx, sy, sx + 1, sy + 1);
    let find_next = |p: (isize, isize), back: usize| -> Option<((isize, isize), usize)> {
        for i in 1..=8 {
            let idx = (back + i) % 8;
            let q = (p.0 + DIRS[idx].0, p.1 + DIRS[idx].1);
            if fg(q.0, q.1) {
                // The neighbor checked just before `q` becomes the new backtrack.
                let prev = (p.0 + DIRS[(idx + 7) % 8].0, p.1 + DIRS[(idx + 7) % 8].1);
                let rel = (prev.0 - q.0, prev.1 - q.1);
                let back = DIRS.iter().position(|d| *d == rel).expect("backtrack is a neighbor");
                return Some((q, back));
            }
        }
        None
    };
    // The start pixel's west neighbor is background by construction.
    let Some((first, mut back)) = find_next(start, 0) else {
        return (sx as usize, sy as usize, sx as usize + 1, sy as usize + 1);
    };
    let mut p = first;
    for _ in 0..limit {
        bbox = (bbox.0.min(p.0), bbox.1.min(p.1), bbox.2.max(p.0 + 1), bbox.3.max(p.1 + 1));
        let (q, b) = find_next(p, back).expect("contour pixel has a foreground neighbor");
        if p == start && q == first {
            break;
        }
        p = q;
        back = b;
    }
    (bbox.0 as usize, bbox.1 as usize, bbox.2 as usize, bbox.3 as usize)
}

/// Bounding boxes of the 8-connected foreground (value 1) components with at
/// least `speck_area` pixels, sorted by left edge.
///
/// The image is scanned from the upper left; each new component's box comes
/// from tracing its outer border, and the component is then filled so its
/// interior is not revisited.
pub fn trace_borders_with(binary: &CaptchaImage, speck_area: usize) -> Result<Vec<CharRegion>> {
    check_binary(binary)?;
    let (w, h) = binary.dims();
    let px = binary.pixels();
    let fg = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && px[y as usize * w + x as usize] == 1.0;
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if px[i] != 1.0 || visited[i] {
                continue;
            }
            let (x0, y0, x1, y1) = trace_contour(&fg, (x as isize, y as isize), 4 * w * h + 8);
            let mut area = 0usize;
            visited[i] = true;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                area += 1;
                for (dx, dy) in DIRS {
                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                    if fg(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if !visited[j] {
                            visited[j] = true;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
            if area >= speck_area {
                regions.push(CharRegion {
                    left: x0,
                    top: y0,
                    width: x1 - x0,
                    height: y1 - y0,
                    source: RegionSource::Traced,
                });
            }
        }
    }
    regions.sort_by_key(|r| (r.left, r.top, r.width, r.height));
    Ok(regions)
}

pub fn trace_borders(binary: &CaptchaImage) -> Result<Vec<CharRegion>> {
    trace_borders_with(binary, DEFAULT_SPECK_AREA)
}

/// Leftmost and one-past-rightmost columns holding a foreground pixel.
fn foreground_span(binary: &CaptchaImage) -> Option<(usize, usize)> {
    let (w, h) = binary.dims();
    let col_has = |x: usize| (0..h).any(|y| binary.get(x, y) > 0.0);
    let left = (0..w).find(|&x| col_has(x))?;
    let right = (0..w).rev().find(|&x| col_has(x))? + 1;
    Some((left, right))
}

fn split_span(left: usize, right: usize, k: usize, height: usize) -> Result<Vec<CharRegion>> {
    let span = right - left;
    if k < 1 {
        return Err(Error::param("interval count must be >= 1"));
    }
    if k > span {
        return Err(Error::param(format!("{k} intervals do not fit a {span} px foreground span")));
    }
    let base = span / k;
    Ok((0..k)
        .map(|i| CharRegion {
            left: left + i * base,
            top: 0,
            width: if i + 1 == k { span - i * base } else { base },
            height,
            source: RegionSource::Interval,
        })
        .collect())
}

/// `k` equal-width, full-height regions over the foreground span; the last
/// absorbs the remainder.
pub fn interval_regions(img: &CaptchaImage, k: usize) -> Result<Vec<CharRegion>> {
    let (left, right) =
        foreground_span(img).ok_or_else(|| Error::param("image has no foreground to divide"))?;
    split_span(left, right, k, img.height())
}

/// Index of the interval owning doubled coordinate `m2`; a midpoint exactly
/// on a boundary belongs to the left interval.
fn owner(intervals: &[CharRegion], m2: usize) -> usize {
    intervals
        .iter()
        .position(|iv| m2 <= 2 * iv.right())
        .unwrap_or(intervals.len() - 1)
}

/// Enlarges traced regions to whole characters using the interval grid.
///
/// Each traced region joins the interval containing its horizontal midpoint.
/// A region covering the midlines of several intervals (touching glyphs) is
/// first cut at the interval boundaries between them. Every interval that
/// received something becomes one region: horizontally the union of the
/// interval and its members, vertically the union of its members. Intervals
/// that received nothing are dropped. With no traced regions at all, the
/// intervals are returned unchanged.
pub fn merge_enlarge(traced: &[CharRegion], intervals: &[CharRegion]) -> Vec<CharRegion> {
    if intervals.is_empty() {
        return Vec::new();
    }
    if traced.is_empty() {
        return intervals.to_vec();
    }
    let k = intervals.len();
    let mut members: Vec<Vec<CharRegion>> = vec![Vec::new(); k];
    for t in traced {
        let covered: Vec<usize> = (0..k)
            .filter(|&i| {
                let c2 = intervals[i].mid2();
                2 * t.left <= c2 && c2 < 2 * t.right()
            })
            .collect();
        if covered.len() >= 2 {
            let (first, last) = (covered[0], covered[covered.len() - 1]);
            for j in first..=last {
                let l = if j == first { t.left } else { intervals[j].left.max(t.left) };
                let r = if j == last { t.right() } else { intervals[j].right().min(t.right()) };
                if r > l {
                    members[j].push(CharRegion { left: l, width: r - l, ..*t });
                }
            }
        } else {
            members[owner(intervals, t.mid2())].push(*t);
        }
    }
    let mut out: Vec<CharRegion> = Vec::new();
    for (iv, group) in intervals.iter().zip(&members) {
        if group.is_empty() {
            continue;
        }
        let left = group.iter().map(|r| r.left).min().unwrap().min(iv.left);
        let right = group.iter().map(|r| r.right()).max().unwrap().max(iv.right());
        let top = group.iter().map(|r| r.top).min().unwrap();
        let bottom = group.iter().map(|r| r.bottom()).max().unwrap();
        out.push(CharRegion {
            left,
            top,
            width: right - left,
            height: bottom - top,
            source: RegionSource::Merged,
        });
    }
    enforce_order(&mut out);
    out
}

/// Keeps left edges strictly increasing and spans non-nested.
fn enforce_order(out: &mut [CharRegion]) {
    for i in 1..out.len() {
        let prev = out[i - 1];
        let cur = &mut out[i];
        if cur.left <= prev.left {
            let right = cur.right().max(prev.left + 2);
            cur.left = prev.left + 1;
            cur.width = right - cur.left;
        }
        if cur.right() <= prev.right() {
            let right = prev.right() + 1;
            cur.width = right - cur.left;
        }
    }
}

/// Foreground mask with ink as 1: Otsu threshold, then inversion so that
/// dark pixels are foreground.
pub fn ink_mask(gray: &CaptchaImage) -> Result<CaptchaImage> {
    Ok(invert(&binarize(gray, Threshold::Otsu)?))
}

fn contrast(img: &CaptchaImage) -> f32 {
    let (lo, hi) = img
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Width and height of a typical traced region.
fn typical_size(traced: &[CharRegion]) -> (f64, f64) {
    (
        median(traced.iter().map(|r| r.width).collect()),
        median(traced.iter().map(|r| r.height).collect()),
    )
}

/// How many characters a traced region spans, in typical widths. Fragments
/// that are both narrow and short count as none.
fn char_units(r: &CharRegion, (mw, mh): (f64, f64)) -> usize {
    let units = r.width as f64 / mw;
    if units < 0.5 && (r.height as f64) < 0.5 * mh {
        0
    } else {
        (units.round() as usize).max(1)
    }
}

/// Character count implied by the traced regions, so touching glyphs count
/// twice and gaps between glyphs count for nothing.
fn estimate_k(span: usize, traced: &[CharRegion], max_k: usize) -> usize {
    let typical = typical_size(traced);
    let k: usize = traced.iter().map(|r| char_units(r, typical)).sum();
    k.clamp(1, max_k.max(1)).min(span)
}

/// Equal-width intervals drift when glyph spacing is uneven, so one interval
/// may swallow two whole glyphs. Such regions are split back into their
/// whole traced members, each keeping the fragments nearest to it.
fn separate_crowded(merged: Vec<CharRegion>, traced: &[CharRegion]) -> Vec<CharRegion> {
    let typical = typical_size(traced);
    let mut out = Vec::with_capacity(merged.len());
    for m in merged {
        let inside: Vec<&CharRegion> = traced.iter().filter(|t| t.left >= m.left && t.right() <= m.right()).collect();
        let (whole, fragments): (Vec<&CharRegion>, Vec<&CharRegion>) =
            inside.into_iter().partition(|t| char_units(t, typical) == 1);
        if whole.len() < 2 {
            out.push(m);
            continue;
        }
        let mut parts: Vec<CharRegion> = whole.iter().map(|t| **t).collect();
        for f in fragments {
            let nearest = (0..parts.len())
                .min_by_key(|&i| parts[i].mid2().abs_diff(f.mid2()))
                .expect("at least two parts");
            let p = &mut parts[nearest];
            let (left, right) = (p.left.min(f.left), p.right().max(f.right()));
            let (top, bottom) = (p.top.min(f.top), p.bottom().max(f.bottom()));
            *p = CharRegion { left, top, width: right - left, height: bottom - top, source: p.source };
        }
        parts.sort_by_key(|r| r.left);
        out.extend(parts.into_iter().map(|r| CharRegion { source: RegionSource::Merged, ..r }));
    }
    enforce_order(&mut out);
    out
}

/// Regions for one image under `cfg`, before cropping.
pub fn find_regions(img: &CaptchaImage, cfg: &SegmentationConfig) -> Result<Vec<CharRegion>> {
    let gray = grayscale(img);
    if contrast(&gray) < MIN_CONTRAST {
        return Err(Error::EmptyCaptcha);
    }
    let ink = ink_mask(&gray)?;
    let traced = trace_borders_with(&ink, cfg.speck_area)?;
    // Drop residual specks from the mask so they cannot stretch the span.
    let mut clean = CaptchaImage::filled(ink.width(), ink.height(), 0.0);
    for r in &traced {
        for y in r.top..r.bottom() {
            for x in r.left..r.right() {
                clean.set(x, y, ink.get(x, y));
            }
        }
    }
    let Some((left, right)) = foreground_span(&clean) else {
        return Err(Error::EmptyCaptcha);
    };
    let span = right - left;
    match cfg.method {
        SegMethod::TracingOnly => Ok(traced),
        SegMethod::Full => {
            let k = cfg.k.unwrap_or_else(|| estimate_k(span, &traced, cfg.max_k)).min(span);
            let intervals = split_span(left, right, k, img.height())?;
            let merged = merge_enlarge(&traced, &intervals);
            // A caller-fixed count is kept as given.
            Ok(if cfg.k.is_some() { merged } else { separate_crowded(merged, &traced) })
        }
        SegMethod::IntervalOnly => {
            let rows: Vec<usize> = (0..clean.height())
                .filter(|&y| (left..right).any(|x| clean.get(x, y) > 0.0))
                .collect();
            let fg_height = rows.last().unwrap() - rows[0] + 1;
            let k = cfg
                .k
                .unwrap_or_else(|| ((span as f64 / (cfg.char_aspect * fg_height as f64)).round() as usize).clamp(1, cfg.max_k))
                .min(span);
            let mut out = Vec::new();
            for iv in split_span(left, right, k, img.height())? {
                let ys: Vec<usize> = (0..clean.height())
                    .filter(|&y| (iv.left..iv.right()).any(|x| clean.get(x, y) > 0.0))
                    .collect();
                if let (Some(&top), Some(&bottom)) = (ys.first(), ys.last()) {
                    out.push(CharRegion {
                        top,
                        height: bottom - top + 1,
                        ..iv
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Background level used to pad patches: the median intensity.
fn background_level(gray: &CaptchaImage) -> f32 {
    let mut v: Vec<f32> = gray.pixels().to_vec();
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Crops, pads to square and resizes each region.
pub fn extract_patches(img: &CaptchaImage, regions: &[CharRegion], patch_size: usize) -> Result<Vec<Segment>> {
    let gray = grayscale(img);
    let bg = background_level(&gray);
    regions
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let crop = gray.crop(r.left, r.top, r.width, r.height)?;
            Ok(Segment {
                region: *r,
                patch: crop.pad_to_square(bg).resize(patch_size, patch_size),
                index,
            })
        })
        .collect()
}

/// Segments a (denoised) CAPTCHA into per-character patches in left-to-right
/// order.
pub fn segment(img: &CaptchaImage, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    let regions = find_regions(img, cfg)?;
    extract_patches(img, &regions, cfg.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Union-find labeling over 8-neighborhoods, the independent oracle.
    pub(crate) fn oracle_components(px: &[f32], w: usize, h: usize, speck: usize) -> Vec<(usize, usize, usize, usize)> {
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut parent: Vec<usize> = (0..w * h).collect();
        for y in 0..h {
            for x in 0..w {
                if px[y * w + x] != 1.0 {
                    continue;
                }
                for (dx, dy) in [(-1isize, -1isize), (0, -1), (1, -1), (-1, 0)] {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && px[ny as usize * w + nx as usize] == 1.0 {
                        let a = find(&mut parent, y * w + x);
                        let b = find(&mut parent, ny as usize * w + nx as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut comps: std::collections::BTreeMap<usize, (usize, usize, usize, usize, usize)> = Default::default();
        for y in 0..h {
            for x in 0..w {
                if px[y * w + x] == 1.0 {
                    let r = find(&mut parent, y * w + x);
                    let e = comps.entry(r).or_insert((x, y, x + 1, y + 1, 0));
                    *e = (e.0.min(x), e.1.min(y), e.2.max(x + 1), e.3.max(y + 1), e.4 + 1);
                }
            }
        }
        let mut out: Vec<_> = comps
            .values()
            .filter(|c| c.4 >= speck)
            .map(|c| (c.0, c.1, c.2 - c.0, c.3 - c.1))
            .collect();
        out.sort();
        out
    }

    fn boxes(r: &[CharRegion]) -> Vec<(usize, usize, usize, usize)> {
        let mut v: Vec<_> = r.iter().map(|r| (r.left, r.top, r.width, r.height)).collect();
        v.sort();
        v
    }

    fn binary_from(w: usize, h: usize, on: &[(usize, usize)]) -> CaptchaImage {
        let mut img = CaptchaImage::filled(w, h, 0.0);
        for &(x, y) in on {
            img.set(x, y, 1.0);
        }
        img
    }

    #[test]
    fn trace_basic_cases() {
        assert!(trace_borders(&CaptchaImage::filled(20, 20, 0.0)).unwrap().is_empty());
        let square: Vec<_> = (5..15).flat_map(|y| (5..15).map(move |x| (x, y))).collect();
        let r = trace_borders(&binary_from(30, 30, &square)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].left, r[0].top, r[0].width, r[0].height), (5, 5, 10, 10));

        let mut on: Vec<_> = (2..6).flat_map(|y| (2..6).map(move |x| (x, y))).collect();
        on.extend((10..14).flat_map(|y| (20..25).map(move |x| (x, y))));
        on.extend([(28, 2), (29, 2)]);
        let img = binary_from(32, 32, &on);
        let r = trace_borders(&img).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(boxes(&r), oracle_components(img.pixels(), 32, 32, 4));
    }

    #[test]
    fn trace_rejects_non_binary() {
        assert!(matches!(trace_borders(&CaptchaImage::filled(4, 4, 0.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn trace_matches_oracle_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..300 {
            let density = [0.2, 0.4, 0.5, 0.6][trial % 4];
            let px: Vec<f32> = (0..32 * 32).map(|_| (rng.random::<f64>() < density) as u8 as f32).collect();
            let img = CaptchaImage::new(32, 32, 1, px.clone()).unwrap();
            let got = trace_borders(&img).unwrap();
            assert_eq!(boxes(&got), oracle_components(&px, 32, 32, 4), "trial {trial}");
            assert!(got.windows(2).all(|p| p[0].left <= p[1].left));
        }
    }

    #[test]
    fn interval_arithmetic() {
        let mut img = CaptchaImage::filled(120, 10, 0.0);
        img.set(10, 5, 1.0);
        img.set(109, 5, 1.0);
        let one = interval_regions(&img, 1).unwrap();
        assert_eq!((one[0].left, one[0].width, one[0].height), (10, 100, 10));
        let four: Vec<usize> = interval_regions(&img, 4).unwrap().iter().map(|r| r.width).collect();
        assert_eq!(four, vec![25, 25, 25, 25]);
        img.set(112, 5, 1.0);
        let four: Vec<usize> = interval_regions(&img, 4).unwrap().iter().map(|r| r.width).collect();
        assert_eq!(four, vec![25, 25, 25, 28]);
        assert!(interval_regions(&img, 200).is_err());
    }

    fn traced(left: usize, top: usize, width: usize, height: usize) -> CharRegion {
        CharRegion { left, top, width, height, source: RegionSource::Traced }
    }

    #[test]
    fn merged_touching_glyphs_split_at_boundary() {
        let img = binary_from(60, 20, &[(10, 5), (49, 5)]);
        let intervals = interval_regions(&img, 2).unwrap();
        let out = merge_enlarge(&[traced(10, 3, 40, 12)], &intervals);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].right(), intervals[0].right());
        assert_eq!(out[1].left, intervals[1].left);
        assert!(out.iter().all(|r| r.top == 3 && r.height == 12));
    }

    #[test]
    fn merge_contains_one_per_interval_and_falls_back() {
        let img = binary_from(60, 20, &[(0, 5), (59, 5)]);
        let intervals = interval_regions(&img, 3).unwrap();
        let t = [traced(2, 4, 14, 10), traced(22, 6, 15, 9), traced(43, 2, 12, 12)];
        let out = merge_enlarge(&t, &intervals);
        assert_eq!(out.len(), 3);
        for (o, t) in out.iter().zip(&t) {
            assert!(o.left <= t.left && o.right() >= t.right());
            assert!(o.height >= t.height);
        }
        assert_eq!(merge_enlarge(&[], &intervals), intervals);
    }

    #[test]
    fn empty_interval_is_dropped_and_ties_go_left() {
        let img = binary_from(40, 10, &[(0, 5), (39, 5)]);
        let intervals = interval_regions(&img, 2).unwrap();
        // Midpoint exactly on the boundary at x = 20.
        let out = merge_enlarge(&[traced(15, 2, 10, 5)], &intervals);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].left, 0);
    }

    fn arb_traced() -> impl Strategy<Value = (Vec<CharRegion>, usize)> {
        (
            prop::collection::vec((0usize..90, 1usize..30, 0usize..20, 1usize..20), 1..8),
            1usize..8,
        )
            .prop_map(|(v, k)| {
                let mut r: Vec<CharRegion> = v
                    .into_iter()
                    .map(|(l, w, t, h)| traced(l, t, w.min(100 - l), h))
                    .collect();
                r.sort_by_key(|r| r.left);
                (r, k)
            })
    }

    proptest! {
        #[test]
        fn merged_regions_are_ordered_and_not_nested((t, k) in arb_traced()) {
            let left = t.iter().map(|r| r.left).min().unwrap();
            let right = t.iter().map(|r| r.right()).max().unwrap();
            prop_assume!(right - left >= k);
            let intervals = split_span(left, right, k, 40).unwrap();
            let out = merge_enlarge(&t, &intervals);
            prop_assert!(!out.is_empty());
            for pair in out.windows(2) {
                prop_assert!(pair[0].left < pair[1].left);
                prop_assert!(pair[0].right() < pair[1].right());
            }
            for a in &out {
                for b in &out {
                    let strictly_inside = b.left > a.left && b.right() < a.right();
                    prop_assert!(!strictly_inside);
                }
            }
        }
    }

    #[test]
    fn count_estimate_ignores_gaps_and_counts_touching_pairs() {
        // Four glyphs with wide gaps: the span is far more than 4 widths.
        let spaced: Vec<_> = (0..4).map(|i| traced(10 + 40 * i, 5, 20, 30)).collect();
        assert_eq!(estimate_k(150, &spaced, 10), 4);
        // A touching pair counts twice, a dot counts nothing, a tall thin
        // stroke counts once.
        let mixed = vec![
            traced(0, 5, 20, 30),
            traced(25, 5, 40, 30),
            traced(70, 30, 4, 4),
            traced(80, 5, 6, 30),
            traced(90, 5, 20, 30),
        ];
        assert_eq!(estimate_k(110, &mixed, 10), 5);
        assert_eq!(estimate_k(110, &mixed, 3), 3);
    }

    #[test]
    fn crowded_interval_is_split_into_whole_glyphs() {
        let glyphs = vec![traced(0, 5, 10, 30), traced(14, 5, 10, 30), traced(25, 30, 3, 3), traced(60, 5, 10, 30)];
        let merged = vec![
            CharRegion { left: 0, top: 5, width: 30, height: 30, source: RegionSource::Merged },
            CharRegion { left: 55, top: 5, width: 20, height: 30, source: RegionSource::Merged },
        ];
        let out = separate_crowded(merged, &glyphs);
        let spans: Vec<_> = out.iter().map(|r| (r.left, r.width)).collect();
        assert_eq!(spans, vec![(0, 10), (14, 14), (55, 20)]);
        assert_eq!(out[1].bottom(), 35);
    }

    #[test]
    fn blank_image_is_empty_captcha() {
        let cfg = SegmentationConfig::default();
        assert!(matches!(segment(&CaptchaImage::filled(60, 20, 1.0), &cfg), Err(Error::EmptyCaptcha)));
        assert!(matches!(segment(&CaptchaImage::filled(60, 20, 0.0), &cfg), Err(Error::EmptyCaptcha)));
    }
}
