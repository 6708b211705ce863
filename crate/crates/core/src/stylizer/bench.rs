//! Throughput measurement for the slicing kernel against its brute-force
//! ground truth.

use super::{apply_affine, slice_grid, slice_grid_reference, BilateralGrid, GuidanceMap};
use crate::error::{Error, Result};
use crate::image_model::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

/// Frames-per-second figures for the optimized and reference paths.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub size: usize,
    pub iters: usize,
    pub fps_opt: f64,
    pub fps_ref: f64,
    pub ratio: f64,
    /// Iterations actually timed on the reference path (it is orders of
    /// magnitude slower, so it runs a reduced count).
    pub ref_iters: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `iterations` frames of the optimized slice+apply and a reduced
/// iteration count of the reference kernel on the same random inputs.
/// FPS figures use the median per-frame time.
pub fn bench_slice(height: usize, width: usize, iterations: usize) -> Result<BenchReport> {
    if iterations < 10 {
        return Err(Error::Config(format!(
            "iterations {iterations} below minimum 10"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut grid = BilateralGrid::zeros();
    for v in grid.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let guide = GuidanceMap {
        height,
        width,
        data: (0..height * width).map(|_| rng.gen_range(0.0..=1.0)).collect(),
    };
    let content = Image::from_fn(height, width, |_, _, _| rng.gen_range(0.0..1.0));

    let mut opt_times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        let field = slice_grid(&grid, &guide);
        let out = apply_affine(&content, &field)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        opt_times.push(dt);
    }

    let ref_iters = (iterations / 16).max(2);
    let mut ref_times = Vec::with_capacity(ref_iters);
    for _ in 0..ref_iters {
        let t0 = Instant::now();
        let field = slice_grid_reference(&grid, &guide);
        let out = apply_affine(&content, &field)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        ref_times.push(dt);
    }

    let t_opt = median(opt_times);
    let t_ref = median(ref_times);
    let fps_opt = 1.0 / t_opt;
    let fps_ref = 1.0 / t_ref;
    Ok(BenchReport {
        size: height.max(width),
        iters: iterations,
        fps_opt,
        fps_ref,
        ratio: fps_opt / fps_ref,
        ref_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_rejects_too_few_iterations() {
        assert!(bench_slice(32, 32, 5).is_err());
    }

    #[test]
    fn bench_reports_positive_rates_and_speedup() {
        let r = bench_slice(64, 64, 10).unwrap();
        assert!(r.fps_opt > 0.0 && r.fps_ref > 0.0);
        assert!(r.ratio > 1.0, "optimized path should beat the triple sum");
    }

    #[test]
    fn per_frame_time_grows_with_pixel_count() {
        let small = bench_slice(32, 32, 10).unwrap();
        let large = bench_slice(128, 128, 10).unwrap();
        assert!(1.0 / large.fps_opt > 1.0 / small.fps_opt);
    }
}
