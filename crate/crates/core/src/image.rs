//! The pixel raster shared by every stage of the pipeline.
//!
//! Pixels are stored row-major, channel-interleaved, as `f32` intensities in
//! `[0, 1]`. Only 1 (gray) and 3 (RGB) channel images exist.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptchaImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl CaptchaImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("unsupported channel count {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("image dimensions must be positive"));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::param(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Builds an image from values that are clamped into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, channels: usize, mut pixels: Vec<f32>) -> Self {
        assert!(channels == 1 || channels == 3);
        assert_eq!(pixels.len(), width * height * channels);
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_clamped(width, height, 1, vec![value; width * height])
    }

    pub fn filled_rgb(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self::from_clamped(width, height, 3, pixels)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_clamped(width, height, 1, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    /// Single-channel accessor.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert_eq!(self.channels, 1);
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        debug_assert_eq!(self.channels, 1);
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            [self.pixels[i]; 3]
        } else {
            [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
        }
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn same_dims(&self, other: &CaptchaImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies a sub-rectangle; the rectangle must lie inside the image.
    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || left + width > self.width || top + height > self.height {
            return Err(Error::param(format!(
                "crop {left},{top} {width}x{height} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(width * height * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            pixels.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        Ok(Self {
            width,
            height,
            channels: c,
            pixels,
        })
    }

    /// Centers the image on a square canvas filled with `background`.
    pub fn pad_to_square(&self, background: f32) -> Self {
        assert_eq!(self.channels, 1);
        let side = self.width.max(self.height);
        let ox = (side - self.width) / 2;
        let oy = (side - self.height) / 2;
        let mut out = vec![background.clamp(0.0, 1.0); side * side];
        for y in 0..self.height {
            let src = &self.pixels[y * self.width..(y + 1) * self.width];
            let row = (y + oy) * side + ox;
            out[row..row + self.width].copy_from_slice(src);
        }
        Self {
            width: side,
            height: side,
            channels: 1,
            pixels: out,
        }
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let c = self.channels;
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut out = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for ch in 0..c {
                    let p = |xx: usize, yy: usize| self.pixels[(yy * self.width + xx) * c + ch];
                    let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                    let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                    out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels: c,
            pixels: out,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let res = if self.channels == 1 {
            let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([q(self.get(x as usize, y as usize))])
            });
            img.write_to(&mut buf, ImageFormat::Png)
        } else {
            let img = RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                let [r, g, b] = self.rgb(x as usize, y as usize);
                Rgb([q(r), q(g), q(b)])
            });
            img.write_to(&mut buf, ImageFormat::Png)
        };
        res.map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory(bytes).map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(Self::from_dynamic(decoded))
    }

    fn from_dynamic(decoded: image::DynamicImage) -> Self {
        let gray_like = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray_like {
            let g = decoded.to_luma8();
            let pixels = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            Self::from_clamped(g.width() as usize, g.height() as usize, 1, pixels)
        } else {
            let c = decoded.to_rgb8();
            let pixels = c.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect();
            Self::from_clamped(c.width() as usize, c.height() as usize, 3, pixels)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(decoded))
    }

    /// Quantizes to 8 bits per channel, matching what a PNG round-trip yields.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round() / 255.0)
            .collect();
        Self::from_clamped(self.width, self.height, self.channels, pixels)
    }
}
