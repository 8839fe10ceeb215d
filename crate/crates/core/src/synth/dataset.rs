//! On-disk datasets: PNG pairs plus a JSONL manifest.
//!
//! The manifest's first line is a header `{"charset", "canonical_size"}`;
//! every following line is one [`ManifestEntry`]. Paths are relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{derive_seed, synthesize_pair, Charset, GlyphBox, NoiseSpec, StyleSpec};
use crate::error::{Error, Result};
use crate::image::CaptchaImage;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
    pub label: String,
    pub length: usize,
    pub noise_spec: NoiseSpec,
    pub seed: u64,
    pub split: Split,
    /// Ground-truth glyph boxes, used to label training segments.
    #[serde(default)]
    pub boxes: Vec<GlyphBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    charset: Charset,
    canonical_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub charset: Charset,
    pub canonical_size: (usize, usize),
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            charset: self.charset.clone(),
            canonical_size: self.canonical_size,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Loads `path`, which may be the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Data(format!("{}: empty manifest", file.display())))?,
        )?;
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let manifest = Self {
            charset: header.charset,
            canonical_size: header.canonical_size,
            entries,
            root,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label.chars().count() != e.length {
                return Err(Error::Data(format!("entry {}: length {} != label {:?}", e.image_path, e.length, e.label)));
            }
            for p in std::iter::once(&e.image_path).chain(e.clean_path.as_ref()) {
                let rel = Path::new(p);
                let escapes = rel
                    .components()
                    .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
                if escapes {
                    return Err(Error::Data(format!("path {p:?} leaves the dataset root")));
                }
                if !seen.insert(p.clone()) {
                    return Err(Error::Data(format!("duplicate path {p:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_noisy(&self, entry: &ManifestEntry) -> Result<CaptchaImage> {
        CaptchaImage::load_png(&self.root.join(&entry.image_path))
    }

    pub fn load_clean(&self, entry: &ManifestEntry) -> Result<CaptchaImage> {
        let rel = entry
            .clean_path
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("entry {} has no clean counterpart", entry.image_path)))?;
        CaptchaImage::load_png(&self.root.join(rel))
    }

    /// SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

/// Synthesizes `count` pairs under `out_root` and writes the manifest.
///
/// The first `round(count * split)` samples form the training split. An
/// existing non-empty `out_root` is refused unless `overwrite` is set.
pub fn build_dataset(
    style: &StyleSpec,
    noise: &NoiseSpec,
    count: usize,
    split: f64,
    out_root: &Path,
    seed: u64,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if count < 1 {
        return Err(Error::param("dataset count must be >= 1"));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::param(format!("split {split} must lie strictly between 0 and 1")));
    }
    style.validate()?;
    noise.validate()?;
    if out_root.exists() {
        let non_empty = fs::read_dir(out_root)
            .map_err(|e| Error::io(out_root, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Precondition(format!(
                "{} is not empty; pass the overwrite flag to replace it",
                out_root.display()
            )));
        }
        let images = out_root.join("images");
        if images.exists() {
            fs::remove_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        }
    }
    let images = out_root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let n_train = ((count as f64 * split).round() as usize).min(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = derive_seed(seed, 1_000 + i as u64);
        let s = synthesize_pair(style, noise, sample_seed)?;
        let noisy_rel = format!("images/{i:06}_noisy.png");
        let clean_rel = format!("images/{i:06}_clean.png");
        s.noisy.save_png(&out_root.join(&noisy_rel))?;
        s.clean.save_png(&out_root.join(&clean_rel))?;
        entries.push(ManifestEntry {
            image_path: noisy_rel,
            clean_path: Some(clean_rel),
            length: s.label.chars().count(),
            label: s.label,
            noise_spec: s.noise,
            seed: sample_seed,
            split: if i < n_train { Split::Train } else { Split::Test },
            boxes: s.boxes,
        });
    }
    let manifest = DatasetManifest {
        charset: style.charset.clone(),
        canonical_size: style.canvas,
        entries,
        root: out_root.to_path_buf(),
    };
    manifest.validate()?;
    let path = out_root.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
