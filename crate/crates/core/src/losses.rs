//! Training objectives: the stylizer loss suite (masked change penalty,
//! content, style, grid smoothness, weighted total) and the contrastive
//! family (SC, selective SSC with top-k pooling, SSMC with margin).
//!
//! Every loss returns its value together with analytic gradients; the test
//! suite validates each against central finite differences.

use crate::error::{Error, Result};
use crate::image_model::Image;
use crate::nn::Tensor;
use crate::stylizer::{BilateralGrid, CELL_COEFFS, GRID_D, GRID_H, GRID_W};
use serde::{Deserialize, Serialize};

/// Axis-aligned boxes `(x, y, w, h)` in pixel units.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoxList(pub Vec<(usize, usize, usize, usize)>);

impl BoxList {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for &(x, y, w, h) in &self.0 {
            if w < 1 || h < 1 || x + w > width || y + h > height {
                return Err(Error::OutOfRange(format!(
                    "box ({x}, {y}, {w}, {h}) outside {width}x{height} raster"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel weight: 1 inside the union of boxes, 0.01 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub const MASK_BACKGROUND: f64 = 0.01;

pub fn build_mask(boxes: &BoxList, height: usize, width: usize) -> Result<Mask> {
    boxes.validate(height, width)?;
    let mut data = vec![MASK_BACKGROUND; height * width];
    for &(x, y, w, h) in &boxes.0 {
        for yy in y..y + h {
            for xx in x..x + w {
                data[yy * width + xx] = 1.0;
            }
        }
    }
    Ok(Mask { height, width, data })
}

/// Experiment weights. The stylizer defaults follow the weighted-total
/// convention `0.5 / 1 / 0.015 / 1`; `lambda_ssmc` scales the contrastive
/// term in the task objective and `delta` is the contrastive margin.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "d_lambda_c")]
    pub lambda_c: f64,
    #[serde(default = "d_lambda_sa")]
    pub lambda_sa: f64,
    #[serde(default = "d_lambda_r")]
    pub lambda_r: f64,
    #[serde(default = "d_lambda_mask")]
    pub lambda_mask: f64,
    #[serde(default = "d_lambda_ssmc")]
    pub lambda_ssmc: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
}

fn d_lambda_c() -> f64 {
    0.5
}
fn d_lambda_sa() -> f64 {
    1.0
}
fn d_lambda_r() -> f64 {
    0.015
}
fn d_lambda_mask() -> f64 {
    1.0
}
fn d_lambda_ssmc() -> f64 {
    10.0
}
fn d_delta() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: d_lambda_c(),
            lambda_sa: d_lambda_sa(),
            lambda_r: d_lambda_r(),
            lambda_mask: d_lambda_mask(),
            lambda_ssmc: d_lambda_ssmc(),
            delta: d_delta(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_sa", self.lambda_sa),
            ("lambda_r", self.lambda_r),
            ("lambda_mask", self.lambda_mask),
            ("lambda_ssmc", self.lambda_ssmc),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Two same-shape feature maps from a paired forward pass.
#[derive(Debug, Clone)]
pub struct FeaturePair<'a> {
    pub f1: &'a Tensor,
    pub f2: &'a Tensor,
}

impl<'a> FeaturePair<'a> {
    pub fn new(f1: &'a Tensor, f2: &'a Tensor) -> Result<Self> {
        if !f1.same_shape(f2) {
            return Err(Error::shape(f1.shape_str(), f2.shape_str()));
        }
        Ok(FeaturePair { f1, f2 })
    }
}

/// Mean weighted L1 change between output and content:
/// `sum |O - C| * M / (h * w * 3)`. The mask weight is shared by the three
/// channels of a pixel.
pub fn mask_loss(output: &Image, content: &Image, mask: &Mask) -> Result<(f64, Image)> {
    if !output.same_shape(content) || output.height != mask.height || output.width != mask.width {
        return Err(Error::shape(output.shape_str(), content.shape_str()));
    }
    let norm = (output.height * output.width * 3) as f64;
    let mut grad = Image::new(output.height, output.width);
    let mut total = 0.0;
    for (i, (o, c)) in output.data.iter().zip(content.data.iter()).enumerate() {
        let m = mask.data[i / 3];
        let d = o - c;
        total += d.abs() * m;
        grad.data[i] = d.signum() * m / norm;
    }
    Ok((total / norm, grad))
}

/// Mean squared difference over all feature elements; gradient w.r.t. the
/// first argument.
pub fn content_loss(f_out: &Tensor, f_content: &Tensor) -> Result<(f64, Tensor)> {
    if !f_out.same_shape(f_content) {
        return Err(Error::shape(f_out.shape_str(), f_content.shape_str()));
    }
    let n = f_out.data.len() as f64;
    let mut grad = Tensor::zeros(f_out.h, f_out.w, f_out.c);
    let mut total = 0.0;
    for (i, (a, b)) in f_out.data.iter().zip(f_content.data.iter()).enumerate() {
        let d = a - b;
        total += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

/// Per-channel mean and standard deviation of a feature map across its
/// spatial axes (population convention).
pub fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = (t.h * t.w) as f64;
    let mut mean = vec![0.0; t.c];
    for px in t.data.chunks_exact(t.c) {
        for (m, v) in mean.iter_mut().zip(px.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; t.c];
    for px in t.data.chunks_exact(t.c) {
        for (vv, (v, m)) in var.iter_mut().zip(px.iter().zip(mean.iter())) {
            let d = v - m;
            *vv += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// Target statistics for one style: per-tap, per-channel mean and std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleStats {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl StyleStats {
    pub fn from_taps(taps: &[Tensor]) -> Self {
        let mut means = Vec::with_capacity(taps.len());
        let mut stds = Vec::with_capacity(taps.len());
        for t in taps {
            let (m, s) = channel_stats(t);
            means.push(m);
            stds.push(s);
        }
        StyleStats { means, stds }
    }
}

/// Statistic-matching style loss over a set of taps:
/// `sum_taps ||mu - mu*||^2 + ||sigma - sigma*||^2`; gradients per tap.
pub fn style_loss(taps: &[Tensor], target: &StyleStats) -> Result<(f64, Vec<Tensor>)> {
    if taps.len() != target.means.len() {
        return Err(Error::Config(format!(
            "style stats cover {} taps, got {}",
            target.means.len(),
            taps.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(taps.len());
    for (ti, t) in taps.iter().enumerate() {
        if t.c != target.means[ti].len() {
            return Err(Error::Config(format!(
                "tap {ti} has {} channels, stats have {}",
                t.c,
                target.means[ti].len()
            )));
        }
        let n = (t.h * t.w) as f64;
        let (mean, std) = channel_stats(t);
        let mut grad = Tensor::zeros(t.h, t.w, t.c);
        let mut dmu = vec![0.0; t.c];
        let mut dsig = vec![0.0; t.c];
        for ch in 0..t.c {
            let em = mean[ch] - target.means[ti][ch];
            let es = std[ch] - target.stds[ti][ch];
            total += em * em + es * es;
            dmu[ch] = 2.0 * em;
            dsig[ch] = 2.0 * es;
        }
        // d mu / d x = 1/n ; d sigma / d x = (x - mu) / (n * sigma)
        for (i, v) in t.data.iter().enumerate() {
            let ch = i % t.c;
            let mut g = dmu[ch] / n;
            if std[ch] > 0.0 {
                g += dsig[ch] * (v - mean[ch]) / (n * std[ch]);
            }
            grad.data[i] = g;
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Smoothness penalty on the grid: mean over axis-adjacent cell pairs of
/// the summed squared coefficient differences.
pub fn laplacian_reg(grid: &BilateralGrid) -> (f64, BilateralGrid) {
    let mut total = 0.0;
    let mut grad = BilateralGrid::zeros();
    let n_pairs = ((GRID_H - 1) * GRID_W * GRID_D
        + GRID_H * (GRID_W - 1) * GRID_D
        + GRID_H * GRID_W * (GRID_D - 1)) as f64;
    let mut accumulate = |a: (usize, usize, usize), b: (usize, usize, usize), grad: &mut BilateralGrid| {
        for c in 0..CELL_COEFFS {
            let d = grid.cell(a.0, a.1, a.2)[c] - grid.cell(b.0, b.1, b.2)[c];
            total += d * d;
            grad.cell_mut(a.0, a.1, a.2)[c] += 2.0 * d / n_pairs;
            grad.cell_mut(b.0, b.1, b.2)[c] -= 2.0 * d / n_pairs;
        }
    };
    for i in 0..GRID_H {
        for j in 0..GRID_W {
            for k in 0..GRID_D {
                if i + 1 < GRID_H {
                    accumulate((i, j, k), (i + 1, j, k), &mut grad);
                }
                if j + 1 < GRID_W {
                    accumulate((i, j, k), (i, j + 1, k), &mut grad);
                }
                if k + 1 < GRID_D {
                    accumulate((i, j, k), (i, j, k + 1), &mut grad);
                }
            }
        }
    }
    (total / n_pairs, grad)
}

/// Weighted total of the four stylizer loss components.
pub fn cbst_total_loss(
    content: f64,
    style: f64,
    regularizer: f64,
    mask: f64,
    w: &LossWeights,
) -> f64 {
    w.lambda_c * content + w.lambda_sa * style + w.lambda_r * regularizer + w.lambda_mask * mask
}

/// Elementwise squared difference of a feature pair.
pub fn variance_matrix(p: &FeaturePair) -> Tensor {
    let mut v = Tensor::zeros(p.f1.h, p.f1.w, p.f1.c);
    for (o, (a, b)) in v.data.iter_mut().zip(p.f1.data.iter().zip(p.f2.data.iter())) {
        let d = a - b;
        *o = d * d;
    }
    v
}

/// Plain squared-distance contrast: `sum (F1 - F2)^2` over every element.
/// Gradients returned for both streams.
pub fn sc_loss(p: &FeaturePair) -> (f64, Tensor, Tensor) {
    let mut g1 = Tensor::zeros(p.f1.h, p.f1.w, p.f1.c);
    let mut g2 = Tensor::zeros(p.f1.h, p.f1.w, p.f1.c);
    let mut total = 0.0;
    for (i, (a, b)) in p.f1.data.iter().zip(p.f2.data.iter()).enumerate() {
        let d = a - b;
        total += d * d;
        g1.data[i] = 2.0 * d;
        g2.data[i] = -2.0 * d;
    }
    (total, g1, g2)
}

/// Mean of the `k` largest entries of a spatial map.
pub fn k_maxpooling(map: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > map.len() {
        return Err(Error::Config(format!(
            "k = {k} outside [1, {}]",
            map.len()
        )));
    }
    let mut sorted: Vec<f64> = map.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Selection count for the selective losses: `max(1, floor(H*W / 16))`.
pub fn selective_k(h: usize, w: usize) -> usize {
    ((h * w) / 16).max(1)
}

/// Indices of k largest entries (any maximal set under ties).
fn top_k_indices(map: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.len()).collect();
    idx.sort_by(|&a, &b| map[b].partial_cmp(&map[a]).unwrap());
    idx.truncate(k);
    idx
}

fn selective_loss(p: &FeaturePair, delta: f64) -> Result<(f64, Tensor, Tensor)> {
    let (h, w, c) = (p.f1.h, p.f1.w, p.f1.c);
    let k = selective_k(h, w);
    // per-pixel channel mean of the variance matrix, margin applied
    let mut pixel_mean = vec![0.0; h * w];
    for (px, (a, b)) in pixel_mean
        .iter_mut()
        .zip(p.f1.data.chunks_exact(c).zip(p.f2.data.chunks_exact(c)))
    {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            let d = x - y;
            acc += d * d;
        }
        *px = (acc / c as f64 - delta).max(0.0);
    }
    let selected = top_k_indices(&pixel_mean, k);
    let total = selected.iter().map(|&i| pixel_mean[i]).sum::<f64>() / k as f64;

    // gradient flows only into selected pixels whose margin is not clipped
    let mut g1 = Tensor::zeros(h, w, c);
    let mut g2 = Tensor::zeros(h, w, c);
    let scale = 1.0 / (k as f64 * c as f64);
    for &pi in &selected {
        if pixel_mean[pi] <= 0.0 {
            continue;
        }
        for ch in 0..c {
            let i = pi * c + ch;
            let d = p.f1.data[i] - p.f2.data[i];
            g1.data[i] = 2.0 * d * scale;
            g2.data[i] = -2.0 * d * scale;
        }
    }
    Ok((total, g1, g2))
}

/// Top-k selective contrast: channel-mean variance per pixel, pooled over
/// the k most-changed pixels.
pub fn ssc_loss(p: &FeaturePair) -> Result<(f64, Tensor, Tensor)> {
    selective_loss(p, 0.0)
}

/// Margin variant: per-pixel variance means are reduced by `delta` and
/// clipped at zero before the top-k pooling.
pub fn ssmc_loss(p: &FeaturePair, delta: f64) -> Result<(f64, Tensor, Tensor)> {
    if delta < 0.0 {
        return Err(Error::Config(format!("delta {delta} must be >= 0")));
    }
    selective_loss(p, delta)
}

/// Task objective: `task + lambda * contrast`, with the matching gradient
/// combination left to the caller (it is a plain weighted sum).
pub fn total_task_loss(task: f64, ssmc: f64, lambda_ssmc: f64) -> f64 {
    task + lambda_ssmc * ssmc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn build_mask_cases() {
        let empty = build_mask(&BoxList::default(), 3, 3).unwrap();
        assert!(empty.data.iter().all(|v| *v == MASK_BACKGROUND));

        let full = build_mask(&BoxList(vec![(0, 0, 3, 3)]), 3, 3).unwrap();
        assert!(full.data.iter().all(|v| *v == 1.0));

        let m = build_mask(&BoxList(vec![(1, 1, 2, 2)]), 4, 4).unwrap();
        assert_eq!(m.data.iter().filter(|v| **v == 1.0).count(), 4);
        assert_eq!(m.data.iter().filter(|v| **v == MASK_BACKGROUND).count(), 12);

        assert!(build_mask(&BoxList(vec![(3, 3, 2, 2)]), 4, 4).is_err());
        assert!(build_mask(&BoxList(vec![(0, 0, 0, 1)]), 4, 4).is_err());
    }

    #[test]
    fn mask_loss_hand_values() {
        let mut o = Image::new(1, 1);
        o.data.copy_from_slice(&[0.6, 0.2, 0.9]);
        let mut c = Image::new(1, 1);
        c.data.copy_from_slice(&[0.5, 0.3, 0.8]);
        let m1 = Mask {
            height: 1,
            width: 1,
            data: vec![1.0],
        };
        let (l1, _) = mask_loss(&o, &c, &m1).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12);
        let m2 = Mask {
            height: 1,
            width: 1,
            data: vec![MASK_BACKGROUND],
        };
        let (l2, _) = mask_loss(&o, &c, &m2).unwrap();
        assert!((l2 - 0.001).abs() < 1e-12);
        let (zero, _) = mask_loss(&c, &c, &m1).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn content_loss_hand_values() {
        let a = Tensor {
            h: 1,
            w: 2,
            c: 1,
            data: vec![0.0, 0.0],
        };
        let b = Tensor {
            h: 1,
            w: 2,
            c: 1,
            data: vec![1.0, 3.0],
        };
        let (l, _) = content_loss(&a, &b).unwrap();
        assert!((l - 5.0).abs() < 1e-12);
        let (z, _) = content_loss(&a, &a).unwrap();
        assert_eq!(z, 0.0);
        let ones = Tensor {
            h: 1,
            w: 2,
            c: 1,
            data: vec![1.0, 1.0],
        };
        let (u, _) = content_loss(&ones, &a).unwrap();
        assert!((u - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_loss_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let taps = vec![random_tensor(5, 4, 3, &mut rng), random_tensor(3, 3, 2, &mut rng)];
        let target_src = vec![random_tensor(5, 4, 3, &mut rng), random_tensor(3, 3, 2, &mut rng)];
        let target = StyleStats::from_taps(&target_src);
        let (loss, _) = style_loss(&taps, &target).unwrap();

        // independent recomputation
        let mut expect = 0.0;
        for (t, ts) in taps.iter().zip(target_src.iter()) {
            let (m1, s1) = channel_stats(t);
            let (m2, s2) = channel_stats(ts);
            for ch in 0..t.c {
                expect += (m1[ch] - m2[ch]).powi(2) + (s1[ch] - s2[ch]).powi(2);
            }
        }
        assert!((loss - expect).abs() < 1e-12);

        // matched stats give zero
        let (z, _) = style_loss(&taps, &StyleStats::from_taps(&taps)).unwrap();
        assert!(z.abs() < 1e-20);

        // one channel mean off by 2
        let base = Tensor {
            h: 2,
            w: 2,
            c: 1,
            data: vec![0.1, 0.4, 0.7, 0.2],
        };
        let mut shifted = base.clone();
        for v in shifted.data.iter_mut() {
            *v += 2.0;
        }
        let (l, _) = style_loss(&[shifted], &StyleStats::from_taps(&[base])).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn style_loss_missing_stats_is_error() {
        let t = Tensor::zeros(2, 2, 1);
        let target = StyleStats {
            means: vec![],
            stds: vec![],
        };
        assert!(style_loss(&[t], &target).is_err());
    }

    #[test]
    fn laplacian_reg_cases() {
        let (z, _) = laplacian_reg(&BilateralGrid::constant([0.7; 12]));
        assert_eq!(z, 0.0);

        // vary along i only, +1 per step in coefficient 0
        let mut g = BilateralGrid::zeros();
        for i in 0..GRID_H {
            for j in 0..GRID_W {
                for k in 0..GRID_D {
                    g.cell_mut(i, j, k)[0] = i as f64;
                }
            }
        }
        let i_pairs = (GRID_H - 1) * GRID_W * GRID_D;
        let all_pairs = i_pairs + GRID_H * (GRID_W - 1) * GRID_D + GRID_H * GRID_W * (GRID_D - 1);
        let (l, _) = laplacian_reg(&g);
        assert!((l - i_pairs as f64 / all_pairs as f64).abs() < 1e-12);
    }

    #[test]
    fn laplacian_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = BilateralGrid::zeros();
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (_, grad) = laplacian_reg(&g);
        let mut f = |x: &[f64]| {
            let g2 = BilateralGrid { data: x.to_vec() };
            laplacian_reg(&g2).0
        };
        let err = grad_check(&mut f, &g.data.clone(), &grad.data, 1e-5, 80, 7).unwrap();
        assert!(err < 1e-4, "laplacian grad err {err}");
    }

    #[test]
    fn cbst_total_hand_value() {
        let w = LossWeights::default();
        let total = cbst_total_loss(1.0, 1.0, 1.0, 1.0, &w);
        assert!((total - 2.515).abs() < 1e-12);
        assert_eq!(cbst_total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let zero = LossWeights {
            lambda_c: 0.0,
            lambda_sa: 0.0,
            lambda_r: 0.0,
            lambda_mask: 0.0,
            ..Default::default()
        };
        assert_eq!(cbst_total_loss(3.0, 4.0, 5.0, 6.0, &zero), 0.0);
    }

    #[test]
    fn variance_matrix_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = random_tensor(2, 3, 2, &mut rng);
        let b = random_tensor(2, 3, 2, &mut rng);
        let v_ab = variance_matrix(&FeaturePair::new(&a, &b).unwrap());
        let v_ba = variance_matrix(&FeaturePair::new(&b, &a).unwrap());
        assert_eq!(v_ab, v_ba);
        let v_aa = variance_matrix(&FeaturePair::new(&a, &a).unwrap());
        assert!(v_aa.data.iter().all(|v| *v == 0.0));

        let one = Tensor {
            h: 1,
            w: 1,
            c: 1,
            data: vec![1.0],
        };
        let three = Tensor {
            h: 1,
            w: 1,
            c: 1,
            data: vec![3.0],
        };
        let v = variance_matrix(&FeaturePair::new(&one, &three).unwrap());
        assert_eq!(v.data[0], 4.0);
    }

    #[test]
    fn sc_loss_hand_value_and_scale_law() {
        let f1 = Tensor {
            h: 1,
            w: 1,
            c: 2,
            data: vec![1.0, 3.0],
        };
        let f2 = Tensor {
            h: 1,
            w: 1,
            c: 2,
            data: vec![0.0, 1.0],
        };
        let (l, _, _) = sc_loss(&FeaturePair::new(&f1, &f2).unwrap());
        assert!((l - 5.0).abs() < 1e-12);

        let alpha = 1.7;
        let s1 = f1.map(|v| alpha * v);
        let s2 = f2.map(|v| alpha * v);
        let (ls, _, _) = sc_loss(&FeaturePair::new(&s1, &s2).unwrap());
        assert!((ls - alpha * alpha * l).abs() < 1e-12);
    }

    #[test]
    fn k_maxpooling_cases() {
        let map = vec![4.0, 3.0, 2.0, 1.0];
        assert!((k_maxpooling(&map, 2).unwrap() - 3.5).abs() < 1e-15);
        assert!((k_maxpooling(&map, 4).unwrap() - 2.5).abs() < 1e-15);
        let mut spike = vec![0.0; 16];
        spike[7] = 10.0;
        assert!((k_maxpooling(&spike, 1).unwrap() - 10.0).abs() < 1e-15);
        assert!(k_maxpooling(&map, 0).is_err());
        assert!(k_maxpooling(&map, 5).is_err());
    }

    #[test]
    fn ssc_loss_single_spike() {
        // 4x4x1, all zeros vs one pixel at 2: k = 1, loss = 4
        let f1 = Tensor::zeros(4, 4, 1);
        let mut f2 = Tensor::zeros(4, 4, 1);
        f2.data[5] = 2.0;
        let (l, _, _) = ssc_loss(&FeaturePair::new(&f1, &f2).unwrap()).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ssmc_hand_value_and_margin_reduction() {
        let f1 = Tensor {
            h: 1,
            w: 1,
            c: 2,
            data: vec![1.0, 3.0],
        };
        let f2 = Tensor {
            h: 1,
            w: 1,
            c: 2,
            data: vec![0.0, 1.0],
        };
        let p = FeaturePair::new(&f1, &f2).unwrap();
        let (l, _, _) = ssmc_loss(&p, 1.0).unwrap();
        assert!((l - 1.5).abs() < 1e-12);

        // delta = 0 reduces to ssc exactly
        let (a, g1a, _) = ssmc_loss(&p, 0.0).unwrap();
        let (b, g1b, _) = ssc_loss(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(g1a, g1b);

        // everything below the margin clips to zero
        let (z, gz, _) = ssmc_loss(&p, 100.0).unwrap();
        assert_eq!(z, 0.0);
        assert!(gz.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ssmc_monotone_in_delta_and_bounded_by_ssc() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f1 = random_tensor(6, 6, 3, &mut rng);
        let f2 = random_tensor(6, 6, 3, &mut rng);
        let p = FeaturePair::new(&f1, &f2).unwrap();
        let (ssc, _, _) = ssc_loss(&p).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [0.0, 0.05, 0.1, 0.5, 2.0] {
            let (v, _, _) = ssmc_loss(&p, delta).unwrap();
            assert!(v <= ssc + 1e-12);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        // pooled mean of top-k is bounded by (HW/k) * mean over all pixels
        let v = variance_matrix(&p);
        let mut pixel_mean = vec![0.0; 36];
        for (i, px) in v.data.chunks_exact(3).enumerate() {
            pixel_mean[i] = px.iter().sum::<f64>() / 3.0;
        }
        let k = selective_k(6, 6);
        let mean_all = pixel_mean.iter().sum::<f64>() / 36.0;
        assert!(ssc <= (36.0 / k as f64) * mean_all + 1e-12);
    }

    #[test]
    fn contrastive_losses_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f1 = random_tensor(4, 5, 2, &mut rng);
        let f2 = random_tensor(4, 5, 2, &mut rng);
        let p12 = FeaturePair::new(&f1, &f2).unwrap();
        let p21 = FeaturePair::new(&f2, &f1).unwrap();
        assert_eq!(sc_loss(&p12).0, sc_loss(&p21).0);
        assert_eq!(ssc_loss(&p12).unwrap().0, ssc_loss(&p21).unwrap().0);
        assert_eq!(
            ssmc_loss(&p12, 0.3).unwrap().0,
            ssmc_loss(&p21, 0.3).unwrap().0
        );
    }

    #[test]
    fn total_task_loss_values() {
        assert_eq!(total_task_loss(2.0, 5.0, 0.0), 2.0);
        assert!((total_task_loss(1.0, 0.05, 10.0) - 1.5).abs() < 1e-12);
        for lambda in [0.0, 1.0, 5.0, 10.0, 15.0] {
            let v = total_task_loss(1.0, 1.0, lambda);
            assert!((v - (1.0 + lambda)).abs() < 1e-12);
        }
    }
}
