//! Synthetic labeled corpus: geometric shape classes rendered on textured
//! backgrounds, pushed through a family of water-type domains.
//!
//! Every pair group shares one clear latent image across all domains, so
//! cross-domain pairs are exact resyntheses of the same content.

use super::{realize_domain, synthesize_underwater, BackgroundLight, DomainSpec, Image};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Smallest raster that still fits the smallest rendered shape.
pub const MIN_IMAGE_SIZE: usize = 16;

/// Largest supported class count (one geometric family per class).
pub const MAX_CLASSES: usize = 8;

/// One corpus element: an observed image with its class, domain, and the
/// pair group that links cross-domain variants of the same latent.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
    pub domain: usize,
    pub pair_group: usize,
}

/// A latent render plus the axis-aligned box covering the shape.
#[derive(Debug, Clone)]
pub struct RenderedLatent {
    pub image: Image,
    /// `(x, y, w, h)` in pixel units.
    pub bbox: (usize, usize, usize, usize),
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-index streams independent of iteration order.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Built-in water-type presets. The first four are tuned so that domain 3
/// sits near the convex hull of domains 0-2 without equalling any of them;
/// further domains are procedural variations.
pub fn default_domain_specs(n_domains: usize, seed: u64) -> Vec<DomainSpec> {
    const PRESETS: [([f64; 3], f64, [f64; 3]); 6] = [
        ([0.95, 0.93, 0.90], 0.08, [0.16, 0.22, 0.26]),
        ([0.72, 0.90, 0.68], 0.14, [0.10, 0.52, 0.30]),
        ([0.55, 0.74, 0.90], 0.14, [0.10, 0.30, 0.62]),
        // murky teal: markedly lower transmission than the first three, the
        // default held-out water type
        ([0.44, 0.64, 0.74], 0.24, [0.10, 0.45, 0.55]),
        ([0.85, 0.65, 0.60], 0.12, [0.40, 0.25, 0.18]),
        ([0.60, 0.60, 0.60], 0.25, [0.30, 0.34, 0.38]),
    ];
    (0..n_domains)
        .map(|d| {
            if d < PRESETS.len() {
                let (base, amp, b) = PRESETS[d];
                DomainSpec {
                    base_transmission: base,
                    ramp_amplitude: amp,
                    background: BackgroundLight(b),
                    seed: mix_seed(seed, 1000 + d as u64),
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2000 + d as u64));
                let base = [0; 3].map(|_| rng.gen_range(0.55..0.95));
                let amp = rng.gen_range(0.05..0.2);
                DomainSpec {
                    base_transmission: base,
                    ramp_amplitude: amp,
                    background: BackgroundLight([0; 3].map(|_| rng.gen_range(0.1..0.6))),
                    seed: mix_seed(seed, 3000 + d as u64),
                }
            }
        })
        .collect()
}

fn low_frequency_background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut comps = [[0.0f64; 4]; 9];
    for comp in comps.iter_mut() {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let cycles = rng.gen_range(0.5..2.5);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.03..0.09);
        *comp = [angle.cos() * cycles, angle.sin() * cycles, phase, amp];
    }
    Image::from_fn(size, size, |y, x, ch| {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        let mut acc = 0.5;
        for comp in &comps[ch * 3..ch * 3 + 3] {
            acc += comp[3] * (std::f64::consts::TAU * (comp[0] * u + comp[1] * v) + comp[2]).sin();
        }
        acc.clamp(0.15, 0.85)
    })
}

/// Signed distance to a simple polygon; negative inside.
fn polygon_sdf(px: f64, py: f64, verts: &[(f64, f64)]) -> f64 {
    let n = verts.len();
    let mut dist2 = f64::INFINITY;
    let mut inside = false;
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        let (ex, ey) = (x1 - x0, y1 - y0);
        let (wx, wy) = (px - x0, py - y0);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (dx, dy) = (wx - t * ex, wy - t * ey);
        dist2 = dist2.min(dx * dx + dy * dy);
        // even-odd crossing test
        if (y0 > py) != (y1 > py) {
            let xi = x0 + (py - y0) / (y1 - y0) * ex;
            if px < xi {
                inside = !inside;
            }
        }
    }
    let d = dist2.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

fn regular_polygon(cx: f64, cy: f64, r: f64, sides: usize, rot: f64) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|i| {
            let a = rot + std::f64::consts::TAU * i as f64 / sides as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn star_polygon(cx: f64, cy: f64, r: f64, points: usize, rot: f64) -> Vec<(f64, f64)> {
    let inner = r * 0.45;
    (0..points * 2)
        .map(|i| {
            let rad = if i % 2 == 0 { r } else { inner };
            let a = rot + std::f64::consts::PI * i as f64 / points as f64;
            (cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect()
}

/// Shape SDF for a class family, centered at `(cx, cy)` with radius `r`.
fn class_sdf(class: usize, px: f64, py: f64, cx: f64, cy: f64, r: f64, rot: f64) -> f64 {
    let (dx, dy) = (px - cx, py - cy);
    match class {
        // disc
        0 => (dx * dx + dy * dy).sqrt() - r,
        // axis-aligned square
        1 => dx.abs().max(dy.abs()) - r * 0.82,
        // triangle
        2 => polygon_sdf(px, py, &regular_polygon(cx, cy, r, 3, rot)),
        // five-point star
        3 => polygon_sdf(px, py, &star_polygon(cx, cy, r, 5, rot)),
        // ring
        4 => ((dx * dx + dy * dy).sqrt() - r * 0.8).abs() - r * 0.3,
        // diamond (L1 ball)
        5 => (dx.abs() + dy.abs()) - r,
        // cross: union of two bars
        6 => {
            let arm = r * 0.35;
            let h = (dx.abs() - r).max(dy.abs() - arm);
            let v = (dy.abs() - r).max(dx.abs() - arm);
            h.min(v)
        }
        // hexagon
        7 => polygon_sdf(px, py, &regular_polygon(cx, cy, r, 6, rot)),
        _ => unreachable!("class out of range"),
    }
}

/// Renders one latent: textured background plus a single shape of the class
/// family at a seeded position, scale and orientation.
pub fn render_latent(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<RenderedLatent> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {size} below minimum {MIN_IMAGE_SIZE}: smallest shape does not fit"
        )));
    }
    if class >= MAX_CLASSES {
        return Err(Error::Config(format!("class {class} out of range")));
    }
    let mut img = low_frequency_background(size, rng);
    let s = size as f64;
    let cx = rng.gen_range(0.32..0.68) * s;
    let cy = rng.gen_range(0.32..0.68) * s;
    let r = rng.gen_range(0.18..0.30) * s;
    let rot = rng.gen_range(0.0..std::f64::consts::TAU);
    // Extreme-valued channels keep the shape visible on any background.
    let color = [0; 3].map(|_| {
        if rng.gen_bool(0.5) {
            rng.gen_range(0.82..0.98)
        } else {
            rng.gen_range(0.02..0.18)
        }
    });

    for y in 0..size {
        for x in 0..size {
            let d = class_sdf(class, x as f64 + 0.5, y as f64 + 0.5, cx, cy, r, rot);
            // ~1px soft edge
            let cov = (0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                for ch in 0..3 {
                    let bg = img.get(y, x, ch);
                    img.set(y, x, ch, bg + cov * (color[ch] - bg));
                }
            }
        }
    }

    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(size - 1);
    let y1 = ((cy + r).ceil() as usize).min(size - 1);
    Ok(RenderedLatent {
        image: img,
        bbox: (x0, y0, (x1 - x0).max(1), (y1 - y0).max(1)),
    })
}

/// Builds the full multi-domain corpus. Samples within one pair group share
/// an identical latent; the group's variants differ only by domain.
pub fn generate_toy_corpus(
    n_domains: usize,
    n_per_domain_per_class: usize,
    n_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::Config(format!(
            "n_classes {n_classes} outside [2, {MAX_CLASSES}]"
        )));
    }
    if n_domains < 2 {
        return Err(Error::Config("need at least 2 domains".into()));
    }
    let specs = default_domain_specs(n_domains, seed);
    let mut samples = Vec::with_capacity(n_domains * n_classes * n_per_domain_per_class);
    for class in 0..n_classes {
        for rep in 0..n_per_domain_per_class {
            let group = class * n_per_domain_per_class + rep;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, group as u64));
            let latent = render_latent(class, image_size, &mut rng)?;
            for (domain, spec) in specs.iter().enumerate() {
                let (t, b) = realize_domain(spec, image_size, image_size)?;
                let observed = synthesize_underwater(&latent.image, &t, b)?;
                samples.push(LabeledSample {
                    image: observed,
                    label: class,
                    domain,
                    pair_group: group,
                });
            }
        }
    }
    Ok(samples)
}

/// One manifest record; `pair_group` links cross-domain paired samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class: usize,
    pub domain: usize,
    pub pair_group: usize,
}

/// Writes PNGs plus `manifest.json` into `dir`.
pub fn write_corpus(samples: &[LabeledSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("d{}_g{:04}_c{}.png", s.domain, s.pair_group, s.label);
        s.image.write_png(&dir.join(&name))?;
        manifest.push(ManifestEntry {
            path: name,
            class: s.label,
            domain: s.domain,
            pair_group: s.pair_group,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a corpus previously written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<LabeledSample>> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .into_iter()
        .map(|e| {
            Ok(LabeledSample {
                image: Image::read_png(&dir.join(&e.path))?,
                label: e.class,
                domain: e.domain,
                pair_group: e.pair_group,
            })
        })
        .collect()
}
