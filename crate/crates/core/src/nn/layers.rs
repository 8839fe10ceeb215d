//! Layers with hand-written backward passes.
//!
//! A [`Sequential`] forward pass in training mode records a [`Tape`] of
//! per-layer caches; [`Sequential::backward`] consumes it, accumulates
//! parameter gradients and returns the gradient with respect to the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name,
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    fn he_normal(name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let value = (0..shape.iter().product::<usize>())
            .map(|_| T::of(dist.sample(rng)))
            .collect();
        Self::new(name, shape, value)
    }

    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::of(v.f64())).collect(),
            grad: self.grad.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Square-kernel, stride-1 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            pad,
            weight: Param::he_normal(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.kernel, w + 2 * self.pad + 1 - self.kernel)
    }

    /// Unfolds one sample (`c×h×w`) into a `(c·k·k) × (oh·ow)` matrix.
    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let k = self.kernel;
        let p = self.pad as isize;
        let (oh, ow) = self.out_hw(h, w);
        let hw_out = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                    let dx = kx as isize - p;
                    // Valid output columns: 0 <= ox + dx < w.
                    let ox_lo = (-dx).max(0) as usize;
                    let ox_hi = ((w as isize - dx).min(ow as isize)).max(ox_lo as isize) as usize;
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out_row[..ox_lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[ox_hi..].iter_mut().for_each(|v| *v = T::zero());
                        if ox_hi > ox_lo {
                            let s0 = (ox_lo as isize + dx) as usize;
                            out_row[ox_lo..ox_hi].copy_from_slice(&src_row[s0..s0 + (ox_hi - ox_lo)]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = self.pad as isize;
        let (oh, ow) = self.out_hw(h, w);
        let hw_out = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * hw_out..(row + 1) * hw_out];
                    let ddx = kx as isize - p;
                    let ox_lo = (-ddx).max(0) as usize;
                    let ox_hi = ((w as isize - ddx).min(ow as isize)).max(ox_lo as isize) as usize;
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let s = &src[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            dst_row[(ox as isize + ddx) as usize] += s[ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * oh * ow];
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        for i in 0..n {
            self.im2col(x.sample(i), h, w, &mut col);
            let ys = y.sample_mut(i);
            for (oc, b) in self.bias.value.iter().enumerate() {
                ys[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().for_each(|v| *v = *b);
            }
            gemm(
                false,
                false,
                self.out_channels,
                oh * ow,
                kk,
                T::one(),
                &self.weight.value,
                &col,
                T::one(),
                ys,
            );
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let hw = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * hw];
        let mut dcol = vec![T::zero(); kk * hw];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        for i in 0..n {
            let dys = dy.sample(i);
            self.im2col(x.sample(i), h, w, &mut col);
            gemm(
                false,
                true,
                self.out_channels,
                kk,
                hw,
                T::one(),
                dys,
                &col,
                T::one(),
                &mut self.weight.grad,
            );
            for (oc, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dys[oc * hw..(oc + 1) * hw].iter().copied().sum();
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    true,
                    false,
                    kk,
                    hw,
                    self.out_channels,
                    T::one(),
                    &self.weight.value,
                    dys,
                    T::zero(),
                    &mut dcol,
                );
                self.col2im(&dcol, h, w, dx.sample_mut(i));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::he_normal(
                format!("{name}.weight"),
                vec![out_features, in_features],
                in_features,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.n();
        assert_eq!(x.sample_len(), self.in_features, "linear input width mismatch");
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            y.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            n,
            self.out_features,
            self.in_features,
            T::one(),
            &x.data,
            &self.weight.value,
            T::one(),
            &mut y.data,
        );
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let n = x.n();
        gemm(
            true,
            false,
            self.out_features,
            self.in_features,
            n,
            T::one(),
            &dy.data,
            &x.data,
            T::one(),
            &mut self.weight.grad,
        );
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *g += *d;
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape);
            gemm(
                false,
                false,
                n,
                self.in_features,
                self.out_features,
                T::one(),
                &dy.data,
                &self.weight.value,
                T::zero(),
                &mut dx.data,
            );
            dx
        })
    }
}

fn maxpool_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let obase = (i * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        let iy = oy * 2 + dy;
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = ox * 2 + dx;
                            if ix >= w {
                                continue;
                            }
                            let idx = base + iy * w + ix;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
    (y, arg)
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    LeakyRelu(f64),
    /// 2×2 max-pooling at stride 2; odd trailing rows/columns form partial windows.
    MaxPool,
    Flatten,
    /// Mean over the spatial axes, giving `[n, c, 1, 1]`.
    GlobalAvgPool,
    Dropout(f64),
}

#[derive(Debug)]
enum Cache<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Pool { arg: Vec<u32>, in_shape: [usize; 4] },
    Flatten([usize; 4]),
    Mask(Vec<T>),
    None,
}

/// Per-layer state recorded by a training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// Inference pass: dropout disabled, nothing cached.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::Linear(l) => l.forward(&cur),
                Layer::Relu => map(cur, |v| v.max(T::zero())),
                Layer::LeakyRelu(a) => {
                    let a = T::of(*a);
                    map(cur, move |v| if v > T::zero() { v } else { a * v })
                }
                Layer::MaxPool => maxpool_forward(&cur).0,
                Layer::Flatten => flatten(cur),
                Layer::GlobalAvgPool => global_avg_pool(&cur),
                Layer::Dropout(_) => cur,
            };
        }
        cur
    }

    /// Training pass. Dropout masks are drawn from `rng`; with `rng == None`
    /// dropout is disabled (used by gradient checks and the GAN).
    pub fn forward_train(&self, x: &Tensor<T>, mut rng: Option<&mut ChaCha8Rng>) -> (Tensor<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => {
                    let y = c.forward(&cur);
                    caches.push(Cache::Input(cur));
                    y
                }
                Layer::Linear(l) => {
                    let y = l.forward(&cur);
                    caches.push(Cache::Input(cur));
                    y
                }
                Layer::Relu => {
                    let y = map(cur, |v| v.max(T::zero()));
                    caches.push(Cache::Output(y.clone()));
                    y
                }
                Layer::LeakyRelu(a) => {
                    let a = T::of(*a);
                    let y = cur.clone();
                    caches.push(Cache::Input(cur));
                    map(y, move |v| if v > T::zero() { v } else { a * v })
                }
                Layer::MaxPool => {
                    let in_shape = cur.shape;
                    let (y, arg) = maxpool_forward(&cur);
                    caches.push(Cache::Pool { arg, in_shape });
                    y
                }
                Layer::GlobalAvgPool => {
                    caches.push(Cache::Flatten(cur.shape));
                    global_avg_pool(&cur)
                }
                Layer::Flatten => {
                    caches.push(Cache::Flatten(cur.shape));
                    flatten(cur)
                }
                Layer::Dropout(rate) => match rng.as_deref_mut() {
                    Some(r) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let scale = T::of(1.0 / keep);
                        let mask: Vec<T> = (0..cur.data.len())
                            .map(|_| if r.random::<f64>() < keep { scale } else { T::zero() })
                            .collect();
                        let mut y = cur;
                        y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= *m);
                        caches.push(Cache::Mask(mask));
                        y
                    }
                    _ => {
                        caches.push(Cache::None);
                        cur
                    }
                },
            };
        }
        (cur, Tape { caches })
    }

    /// Backpropagates `dout`, accumulating into every parameter's `grad`.
    /// Returns the input gradient when `need_input_grad` is set.
    pub fn backward(&mut self, tape: Tape<T>, dout: Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(tape.caches.len(), self.layers.len());
        let mut grad = dout;
        for (i, (layer, cache)) in self
            .layers
            .iter_mut()
            .zip(tape.caches)
            .enumerate()
            .rev()
        {
            let want_dx = need_input_grad || i > 0;
            grad = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(x)) => match c.backward(&x, &grad, want_dx) {
                    Some(g) => g,
                    None => return None,
                },
                (Layer::Linear(l), Cache::Input(x)) => match l.backward(&x, &grad, want_dx) {
                    Some(g) => g,
                    None => return None,
                },
                (Layer::Relu, Cache::Output(y)) => {
                    grad.data
                        .iter_mut()
                        .zip(&y.data)
                        .for_each(|(g, v)| if *v <= T::zero() { *g = T::zero() });
                    grad
                }
                (Layer::LeakyRelu(a), Cache::Input(x)) => {
                    let a = T::of(*a);
                    grad.data
                        .iter_mut()
                        .zip(&x.data)
                        .for_each(|(g, v)| if *v <= T::zero() { *g *= a });
                    grad
                }
                (Layer::MaxPool, Cache::Pool { arg, in_shape }) => {
                    let mut dx = Tensor::zeros(in_shape);
                    for (g, &a) in grad.data.iter().zip(&arg) {
                        dx.data[a as usize] += *g;
                    }
                    dx
                }
                (Layer::Flatten, Cache::Flatten(shape)) => Tensor::from_vec(shape, grad.data),
                (Layer::GlobalAvgPool, Cache::Flatten(shape)) => {
                    let hw = shape[2] * shape[3];
                    let inv = T::of(1.0 / hw as f64);
                    let mut dx = Tensor::zeros(shape);
                    for (plane, g) in dx.data.chunks_exact_mut(hw).zip(&grad.data) {
                        plane.iter_mut().for_each(|v| *v = *g * inv);
                    }
                    dx
                }
                (Layer::Dropout(_), Cache::Mask(mask)) => {
                    grad.data.iter_mut().zip(&mask).for_each(|(g, m)| *g *= *m);
                    grad
                }
                (Layer::Dropout(_), Cache::None) => grad,
                _ => unreachable!("tape does not match layer stack"),
            };
        }
        need_input_grad.then_some(grad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Linear(l) => {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    pad: c.pad,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
                Layer::Linear(f) => Layer::Linear(Linear {
                    in_features: f.in_features,
                    out_features: f.out_features,
                    weight: f.weight.cast(),
                    bias: f.bias.cast(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::LeakyRelu(a) => Layer::LeakyRelu(*a),
                Layer::MaxPool => Layer::MaxPool,
                Layer::Flatten => Layer::Flatten,
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Dropout(r) => Layer::Dropout(*r),
            })
            .collect();
        Sequential { layers }
    }
}

fn map<T: Real>(mut t: Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    t.data.iter_mut().for_each(|v| *v = f(*v));
    t
}

fn global_avg_pool<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape;
    let inv = 1.0 / (h * w) as f64;
    let data = t
        .data
        .chunks_exact(h * w)
        .map(|plane| T::of(plane.iter().map(|v| v.f64()).sum::<f64>() * inv))
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

fn flatten<T: Real>(t: Tensor<T>) -> Tensor<T> {
    let n = t.n();
    let f = t.sample_len();
    Tensor::from_vec([n, f, 1, 1], t.data)
}
