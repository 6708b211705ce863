//! Minimal dense tensor and layer kit with explicit backward passes.
//!
//! Everything is `f64` so analytic gradients can be validated against
//! central finite differences without noise from the storage type.

use crate::error::{Error, Result};
use crate::image_model::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `h x w x c` feature map, row-major `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Tensor {
            h: img.height,
            w: img.width,
            c: 3,
            data: img.data.clone(),
        }
    }

    pub fn to_image(&self) -> Image {
        assert_eq!(self.c, 3);
        Image {
            height: self.h,
            width: self.w,
            data: self.data.clone(),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        out
    }
}

fn seeded_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; ChaCha keeps it reproducible across platforms.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// 2D convolution with `same`-style padding (`pad = ksize / 2`).
///
/// Weights are stored `(out_c, ky, kx, in_c)` so the inner products run over
/// contiguous memory in both the input and the kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn seeded(in_c: usize, out_c: usize, ksize: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * ksize * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            in_c,
            out_c,
            ksize,
            stride,
            weight: seeded_normal(rng, out_c * ksize * ksize * in_c, std),
            bias: vec![0.0; out_c],
        }
    }

    pub fn zeros(in_c: usize, out_c: usize, ksize: usize, stride: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            ksize,
            stride,
            weight: vec![0.0; out_c * ksize * ksize * in_c],
            bias: vec![0.0; out_c],
        }
    }

    pub fn grads_zero(&self) -> Conv2dGrads {
        Conv2dGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn out_dim(&self, dim: usize) -> usize {
        let pad = self.ksize / 2;
        (dim + 2 * pad - self.ksize) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "channel mismatch");
        let (oh, ow) = (self.out_dim(x.h), self.out_dim(x.w));
        let pad = self.ksize as isize / 2;
        let mut out = Tensor::zeros(oh, ow, self.out_c);
        let k = self.ksize;
        for yo in 0..oh {
            for xo in 0..ow {
                let obase = (yo * ow + xo) * self.out_c;
                for oc in 0..self.out_c {
                    let mut acc = self.bias[oc];
                    for ky in 0..k {
                        let yi = (yo * self.stride + ky) as isize - pad;
                        if yi < 0 || yi >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xi = (xo * self.stride + kx) as isize - pad;
                            if xi < 0 || xi >= x.w as isize {
                                continue;
                            }
                            let ibase = (yi as usize * x.w + xi as usize) * x.c;
                            let wbase = ((oc * k + ky) * k + kx) * self.in_c;
                            for ic in 0..self.in_c {
                                acc += x.data[ibase + ic] * self.weight[wbase + ic];
                            }
                        }
                    }
                    out.data[obase + oc] = acc;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and, when requested,
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &Tensor,
        d_out: &Tensor,
        grads: &mut Conv2dGrads,
        want_dx: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (self.out_dim(x.h), self.out_dim(x.w));
        assert_eq!((d_out.h, d_out.w, d_out.c), (oh, ow, self.out_c));
        let pad = self.ksize as isize / 2;
        let k = self.ksize;
        let mut dx = if want_dx {
            Some(Tensor::zeros(x.h, x.w, x.c))
        } else {
            None
        };
        for yo in 0..oh {
            for xo in 0..ow {
                let obase = (yo * ow + xo) * self.out_c;
                for oc in 0..self.out_c {
                    let g = d_out.data[obase + oc];
                    if g == 0.0 {
                        continue;
                    }
                    grads.bias[oc] += g;
                    for ky in 0..k {
                        let yi = (yo * self.stride + ky) as isize - pad;
                        if yi < 0 || yi >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xi = (xo * self.stride + kx) as isize - pad;
                            if xi < 0 || xi >= x.w as isize {
                                continue;
                            }
                            let ibase = (yi as usize * x.w + xi as usize) * x.c;
                            let wbase = ((oc * k + ky) * k + kx) * self.in_c;
                            for ic in 0..self.in_c {
                                grads.weight[wbase + ic] += g * x.data[ibase + ic];
                            }
                            if let Some(dx) = dx.as_mut() {
                                for ic in 0..self.in_c {
                                    dx.data[ibase + ic] += g * self.weight[wbase + ic];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weight `(out, in)` row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: seeded_normal(rng, out_dim * in_dim, std),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn grads_zero(&self) -> LinearGrads {
        LinearGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], d_out: &[f64], grads: &mut LinearGrads) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = d_out[o];
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// `x` is the forward input (the kink side is decided on the input sign).
pub fn leaky_relu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    assert!(x.same_shape(d_out));
    let mut dx = d_out.clone();
    for (d, v) in dx.data.iter_mut().zip(x.data.iter()) {
        if *v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    dx
}

pub fn leaky_relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| if *v > 0.0 { *v } else { LEAKY_SLOPE * v }).collect()
}

pub fn leaky_relu_vec_backward(x: &[f64], d_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(d_out.iter())
        .map(|(v, g)| if *v > 0.0 { *g } else { LEAKY_SLOPE * g })
        .collect()
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    let mut out = vec![0.0; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (o, v) in out.iter_mut().zip(px.iter()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n;
    }
    out
}

pub fn global_avg_pool_backward(h: usize, w: usize, d_out: &[f64]) -> Tensor {
    let n = (h * w) as f64;
    let mut dx = Tensor::zeros(h, w, d_out.len());
    for px in dx.data.chunks_exact_mut(d_out.len()) {
        for (d, g) in px.iter_mut().zip(d_out.iter()) {
            *d = g / n;
        }
    }
    dx
}

/// Conditional instance normalization: per-style, per-channel scale and
/// shift applied to spatially standardized features.
#[derive(Debug, Clone)]
pub struct Cin {
    pub channels: usize,
    pub n_styles: usize,
    /// `(style, channel)` row-major.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct CinGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct CinCache {
    pub xhat: Tensor,
    pub sigma: Vec<f64>,
}

pub const CIN_DEFAULT_EPS: f64 = 1e-5;

impl Cin {
    pub fn seeded(channels: usize, n_styles: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut gamma = Vec::with_capacity(n_styles * channels);
        let mut beta = Vec::with_capacity(n_styles * channels);
        for _ in 0..n_styles * channels {
            gamma.push(1.0 + 0.1 * rng.gen_range(-1.0..1.0));
            beta.push(0.1 * rng.gen_range(-1.0..1.0));
        }
        Cin {
            channels,
            n_styles,
            gamma,
            beta,
            eps: CIN_DEFAULT_EPS,
        }
    }

    pub fn grads_zero(&self) -> CinGrads {
        CinGrads {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
        }
    }

    pub fn forward(&self, x: &Tensor, style: usize) -> Result<(Tensor, CinCache)> {
        if style >= self.n_styles {
            return Err(Error::UnknownStyle(style));
        }
        if x.c != self.channels {
            return Err(Error::shape(x.shape_str(), format!("channels {}", self.channels)));
        }
        let n = (x.h * x.w) as f64;
        let mut mu = vec![0.0; x.c];
        for px in x.data.chunks_exact(x.c) {
            for (m, v) in mu.iter_mut().zip(px.iter()) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; x.c];
        for px in x.data.chunks_exact(x.c) {
            for (vv, (v, m)) in var.iter_mut().zip(px.iter().zip(mu.iter())) {
                let d = v - m;
                *vv += d * d;
            }
        }
        let sigma: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.h, x.w, x.c);
        let mut out = Tensor::zeros(x.h, x.w, x.c);
        let gam = &self.gamma[style * self.channels..(style + 1) * self.channels];
        let bet = &self.beta[style * self.channels..(style + 1) * self.channels];
        for (i, v) in x.data.iter().enumerate() {
            let ch = i % x.c;
            let xh = (v - mu[ch]) / (sigma[ch] + self.eps);
            xhat.data[i] = xh;
            out.data[i] = gam[ch] * xh + bet[ch];
        }
        Ok((out, CinCache { xhat, sigma }))
    }

    pub fn backward(
        &self,
        cache: &CinCache,
        d_out: &Tensor,
        style: usize,
        grads: &mut CinGrads,
    ) -> Tensor {
        let x = &cache.xhat;
        let n = (x.h * x.w) as f64;
        let gam = &self.gamma[style * self.channels..(style + 1) * self.channels];
        let ggam = &mut grads.gamma[style * self.channels..(style + 1) * self.channels];
        let mut gsum = vec![0.0; x.c];
        let mut gxhat_sum = vec![0.0; x.c];
        for (i, g) in d_out.data.iter().enumerate() {
            let ch = i % x.c;
            gsum[ch] += g;
            gxhat_sum[ch] += g * x.data[i];
            ggam[ch] += g * x.data[i];
        }
        let gbet = &mut grads.beta[style * self.channels..(style + 1) * self.channels];
        for (b, s) in gbet.iter_mut().zip(gsum.iter()) {
            *b += s;
        }
        // dL/dx = gamma/(sigma+eps) * (g - mean(g)) - gamma/(N*sigma) * xhat * sum(g*xhat)
        // (the second term vanishes for constant inputs, where sigma = 0)
        let mut dx = Tensor::zeros(x.h, x.w, x.c);
        for (i, g) in d_out.data.iter().enumerate() {
            let ch = i % x.c;
            let denom = cache.sigma[ch] + self.eps;
            let mut v = gam[ch] / denom * (g - gsum[ch] / n);
            if cache.sigma[ch] > 0.0 {
                v -= gam[ch] / (n * cache.sigma[ch]) * x.data[i] * gxhat_sum[ch];
            }
            dx.data[i] = v;
        }
        dx
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// SGD with classical momentum over a list of parameter vectors.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `params` and `grads` must pair up in a stable order across calls.
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        assert_eq!(params.len(), grads.len());
        for ((p, g), vel) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p[i] -= self.lr * vel[i];
            }
        }
    }
}

/// Adam optimizer over a list of parameter vectors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Softmax cross-entropy; returns `(loss, d_logits, predicted_class)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>, usize) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(probs[label].max(1e-300)).ln();
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    let pred = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    (loss, grad, pred)
}
