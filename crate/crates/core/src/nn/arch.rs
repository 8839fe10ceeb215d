//! Architecture descriptors and the layer stacks they build.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Layer, Linear, Sequential};
use super::tensor::Real;

/// Fully-convolutional denoiser: 3×3 stride-1 pad-1 stages, rectified hidden
/// activations. The network emits logits; callers apply the sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub filters: Vec<usize>,
    pub kernel: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            filters: vec![64, 128, 128, 64, 1],
            kernel: 3,
        }
    }
}

/// Conditional critic over the channel pair (candidate, original). Each conv
/// stage is followed by a leaky rectifier and 2×2 max-pooling; the remaining
/// feature map is averaged spatially and a single fully-connected unit
/// produces the logit, so any input size is accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            filters: vec![16, 32, 64, 128, 256, 256],
            kernel: 3,
            leaky_slope: 0.2,
        }
    }
}

/// Conv/pool trunk followed by fully-connected layers. The output width is
/// not stored here; it comes from the charset (and head count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub fc_sizes: Vec<usize>,
    pub dropout: f64,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            conv_filters: vec![32, 64, 64],
            kernel: 3,
            fc_sizes: vec![1024, 256],
            dropout: 0.5,
        }
    }
}

/// Spatial size after `stages` rounds of 2×2 ceil-mode pooling.
pub fn pooled(mut size: usize, stages: usize) -> usize {
    for _ in 0..stages {
        size = size.div_ceil(2);
    }
    size
}

pub fn build_generator<T: Real>(spec: &GeneratorSpec, seed: u64) -> Sequential<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = 1;
    let last = spec.filters.len() - 1;
    for (i, &c_out) in spec.filters.iter().enumerate() {
        let name = format!("generator.conv{i}");
        layers.push(Layer::Conv(Conv2d::new(&name, c_in, c_out, spec.kernel, spec.kernel / 2, &mut rng)));
        if i < last {
            layers.push(Layer::Relu);
        }
        c_in = c_out;
    }
    Sequential::new(layers)
}

pub fn build_discriminator<T: Real>(spec: &DiscriminatorSpec, seed: u64) -> Sequential<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = 2;
    for (i, &c_out) in spec.filters.iter().enumerate() {
        let name = format!("discriminator.conv{i}");
        layers.push(Layer::Conv(Conv2d::new(&name, c_in, c_out, spec.kernel, spec.kernel / 2, &mut rng)));
        layers.push(Layer::LeakyRelu(spec.leaky_slope));
        layers.push(Layer::MaxPool);
        c_in = c_out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new("discriminator.fc", c_in, 1, &mut rng)));
    Sequential::new(layers)
}

/// Builds a classifier over `in_channels × height × width` inputs with
/// `outputs` logits.
pub fn build_cnn<T: Real>(spec: &CnnSpec, width: usize, height: usize, outputs: usize, seed: u64) -> Sequential<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, &c_out) in spec.conv_filters.iter().enumerate() {
        let name = format!("cnn.conv{i}");
        layers.push(Layer::Conv(Conv2d::new(&name, c_in, c_out, spec.kernel, spec.kernel / 2, &mut rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool);
        c_in = c_out;
    }
    let stages = spec.conv_filters.len();
    let mut features = c_in * pooled(width, stages) * pooled(height, stages);
    layers.push(Layer::Flatten);
    for (i, &size) in spec.fc_sizes.iter().enumerate() {
        layers.push(Layer::Linear(Linear::new(&format!("cnn.fc{i}"), features, size, &mut rng)));
        layers.push(Layer::Relu);
        if spec.dropout > 0.0 {
            layers.push(Layer::Dropout(spec.dropout));
        }
        features = size;
    }
    layers.push(Layer::Linear(Linear::new("cnn.out", features, outputs, &mut rng)));
    Sequential::new(layers)
}
