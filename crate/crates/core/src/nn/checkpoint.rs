//! Single-file model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DWGN" | u32 format_version | u64 descriptor_len | descriptor JSON
//! u32 tensor_count | tensor_count × { u32 name_len | name | u32 ndim | ndim × u32 dim | u64 offset | u64 numel }
//! blob section: f32 values, tensors back to back, offsets relative to the section start
//! ```
//!
//! The descriptor holds the architecture and the training metadata. Loading
//! checks that every tensor the architecture declares is present with the
//! declared shape.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Sequential;
use super::tensor::Real;
use crate::error::{Error, Result};
use super::arch::{CnnSpec, DiscriminatorSpec, GeneratorSpec};

pub const MAGIC: &[u8; 4] = b"DWGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Gan {
        generator: GeneratorSpec,
        discriminator: DiscriminatorSpec,
        /// `(width, height)` of the images the model was trained on.
        input_size: (usize, usize),
    },
    CharCnn {
        cnn: CnnSpec,
        patch_size: usize,
        charset: String,
    },
    ImageCnn {
        cnn: CnnSpec,
        /// Size of the captcha images the model accepts.
        input_size: (usize, usize),
        /// Size the images are resized to before entering the network.
        net_size: (usize, usize),
        heads: usize,
        charset: String,
    },
}

impl Architecture {
    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Gan { .. } => "gan",
            Architecture::CharCnn { .. } => "char_cnn",
            Architecture::ImageCnn { .. } => "image_cnn",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Effective training configuration.
    pub config: serde_json::Value,
    pub epochs_completed: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub history: Vec<EpochRecord>,
    /// Optimizer updates per network, e.g. `{"generator": 10, "discriminator": 10}`.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub seed: u64,
    pub charset: Option<String>,
    pub canonical_size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub training_meta: TrainingMeta,
    pub weights: BTreeMap<String, WeightBlob>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    training_meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn new(architecture: Architecture, training_meta: TrainingMeta) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture,
            training_meta,
            weights: BTreeMap::new(),
        }
    }

    pub fn store<T: Real>(&mut self, net: &Sequential<T>) {
        for p in net.params() {
            self.weights.insert(
                p.name.clone(),
                WeightBlob {
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|v| v.f64() as f32).collect(),
                },
            );
        }
    }

    /// Copies stored weights into `net`, whose layout comes from the architecture.
    pub fn restore<T: Real>(&self, net: &mut Sequential<T>) -> Result<()> {
        for p in net.params_mut() {
            let blob = self
                .weights
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", p.name)))?;
            if blob.shape != p.shape {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, architecture expects {:?}",
                    p.name, blob.shape, p.shape
                )));
            }
            p.value = blob.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let descriptor = serde_json::to_vec(&Descriptor {
            architecture: self.architecture.clone(),
            training_meta: self.training_meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
        out.extend_from_slice(&descriptor);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, blob) in &self.weights {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.shape.len() as u32).to_le_bytes());
            for d in &blob.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.data.len() as u64).to_le_bytes());
            offset += 4 * blob.data.len() as u64;
        }
        for blob in self.weights.values() {
            for v in &blob.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {format_version}")));
        }
        let dlen = r.u64()? as usize;
        let descriptor: Descriptor = serde_json::from_slice(r.take(dlen)?)?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let numel = r.u64()? as usize;
            if shape.iter().product::<usize>() != numel {
                return Err(Error::Format(format!("tensor {name}: shape/numel mismatch")));
            }
            index.push((name, shape, offset, numel));
        }
        let blobs = &bytes[r.pos..];
        let mut weights = BTreeMap::new();
        for (name, shape, offset, numel) in index {
            let end = offset + 4 * numel;
            let raw = blobs
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("tensor {name} runs past end of file")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            weights.insert(name, WeightBlob { shape, data });
        }
        Ok(Self {
            format_version,
            architecture: descriptor.architecture,
            training_meta: descriptor.training_meta,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never clobbers the last good file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Largest elementwise difference between two checkpoints' weights, or
    /// `None` when their tensor sets differ.
    pub fn max_weight_delta(&self, other: &Self) -> Option<f32> {
        if self.weights.len() != other.weights.len() {
            return None;
        }
        let mut max = 0f32;
        for (name, a) in &self.weights {
            let b = other.weights.get(name)?;
            if a.shape != b.shape {
                return None;
            }
            for (x, y) in a.data.iter().zip(&b.data) {
                max = max.max((x - y).abs());
            }
        }
        Some(max)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv2d, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (ModelCheckpoint, Sequential<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new("gen.conv0", 1, 4, 3, 1, &mut rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("gen.conv1", 4, 1, 3, 1, &mut rng)),
        ]);
        let arch = Architecture::Gan {
            generator: GeneratorSpec { filters: vec![4, 1], kernel: 3 },
            discriminator: DiscriminatorSpec::default(),
            input_size: (8, 8),
        };
        let mut ck = ModelCheckpoint::new(arch, TrainingMeta { seed: 9, ..Default::default() });
        ck.store(&net);
        (ck, net)
    }

    #[test]
    fn bytes_round_trip() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DWGN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.max_weight_delta(&ck), Some(0.0));
    }

    #[test]
    fn rejects_corruption_and_shape_mismatch() {
        let (ck, net) = sample();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = ck.to_bytes().unwrap();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let mut bad = ck.clone();
        bad.weights.get_mut("gen.conv0.bias").unwrap().shape = vec![5];
        let mut net2 = net.clone();
        assert!(bad.restore(&mut net2).is_err());
        let mut missing = ck.clone();
        missing.weights.remove("gen.conv1.weight");
        assert!(missing.restore(&mut net2).is_err());
    }
}
