//! Underwater image formation: per-pixel attenuation plus ambient light.
//!
//! An observed image is a per-channel convex combination of the clear latent
//! image and a homogeneous background light, weighted by a transmission map:
//! `I = J * t + (1 - t) * B`. The same model, inverted, recovers the latent
//! from an observation, and a parametric domain family drives the synthesis
//! of multi-domain corpora.

pub mod corpus;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An `h x w x 3` raster of real values, nominal range `[0, 1]`.
///
/// Values may leave the nominal range during processing; clamping happens
/// only when writing to an 8-bit file.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `(y, x, channel)` layout, 3 channels per pixel.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..3 {
                    img.data[(y * width + x) * 3 + ch] = f(y, x, ch);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + ch] = v;
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x3", self.height, self.width)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Reads an 8-bit PNG, mapping sample values linearly onto `[0, 1]`.
    pub fn read_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for (i, px) in img.pixels().enumerate() {
            for ch in 0..3 {
                out.data[i * 3 + ch] = px.0[ch] as f64 / 255.0;
            }
        }
        Ok(out)
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` first.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|ch| {
                    let v = self.get(y, x, ch).clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                });
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resample to a new size (used to derive low-resolution copies).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        assert!(height >= 1 && width >= 1);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, |y, x, ch| {
            // Sample at pixel centers, clamped to the source raster.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            let top = self.get(y0, x0, ch) + tx * (self.get(y0, x1, ch) - self.get(y0, x0, ch));
            let bot = self.get(y1, x0, ch) + tx * (self.get(y1, x1, ch) - self.get(y1, x0, ch));
            top + ty * (bot - top)
        })
    }

    /// Mirror along the vertical axis (the only stock training augmentation).
    pub fn hflip(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, ch| {
            self.get(y, self.width - 1 - x, ch)
        })
    }
}

/// Per-pixel, per-channel residual energy ratio in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TransmissionMap {
    pub fn constant(height: usize, width: usize, t: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&t);
        }
        TransmissionMap { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("transmission value {v}")));
        }
        Ok(())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Homogeneous ambient light, one component per color channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundLight(pub [f64; 3]);

impl BackgroundLight {
    pub fn validate(&self) -> Result<()> {
        for v in self.0 {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!("background light component {v}")));
            }
        }
        Ok(())
    }
}

/// Parametric description of one synthetic water type: a per-channel base
/// transmission with a seeded smooth spatial ramp, plus the ambient light.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub base_transmission: [f64; 3],
    pub ramp_amplitude: f64,
    pub background: BackgroundLight,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        self.background.validate()?;
        if self.ramp_amplitude < 0.0 {
            return Err(Error::Config("ramp amplitude must be >= 0".into()));
        }
        for b in self.base_transmission {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Config(format!(
                    "base transmission {b} must lie in (0, 1]"
                )));
            }
            if b - self.ramp_amplitude <= 0.0 {
                return Err(Error::Config(format!(
                    "base {} minus amplitude {} must stay positive",
                    b, self.ramp_amplitude
                )));
            }
        }
        Ok(())
    }
}

/// `I = J * t + (1 - t) * B`, evaluated per pixel and channel.
pub fn synthesize_underwater(
    latent: &Image,
    t: &TransmissionMap,
    b: BackgroundLight,
) -> Result<Image> {
    if latent.height != t.height || latent.width != t.width {
        return Err(Error::shape(
            latent.shape_str(),
            format!("{}x{}x3", t.height, t.width),
        ));
    }
    t.validate()?;
    b.validate()?;
    let mut out = Image::new(latent.height, latent.width);
    for i in 0..latent.data.len() {
        let tv = t.data[i];
        out.data[i] = latent.data[i] * tv + (1.0 - tv) * b.0[i % 3];
    }
    Ok(out)
}

/// Inverts the formation model: `J = (I - (1 - t) * B) / t`.
///
/// Requires every transmission value to be at least `t_min` so the division
/// stays well conditioned.
pub fn recover_latent(
    observed: &Image,
    t: &TransmissionMap,
    b: BackgroundLight,
    t_min: f64,
) -> Result<Image> {
    if observed.height != t.height || observed.width != t.width {
        return Err(Error::shape(
            observed.shape_str(),
            format!("{}x{}x3", t.height, t.width),
        ));
    }
    if !(t_min > 0.0) {
        return Err(Error::Config(format!("t_min {t_min} must be > 0")));
    }
    let min_t = t.min_value();
    if min_t < t_min {
        return Err(Error::OutOfRange(format!(
            "transmission {min_t} below t_min {t_min}; inversion ill-conditioned"
        )));
    }
    let mut out = Image::new(observed.height, observed.width);
    for i in 0..observed.data.len() {
        let tv = t.data[i];
        out.data[i] = (observed.data[i] - (1.0 - tv) * b.0[i % 3]) / tv;
    }
    Ok(out)
}

/// Default inversion floor: bounds the division's conditioning by 20.
pub const DEFAULT_T_MIN: f64 = 0.05;

/// Realizes a domain at a concrete raster size.
///
/// The transmission is `base - amplitude * r(x, y)` per channel, where `r`
/// is a smooth ramp in `[0, 1]` whose orientation and phase derive from the
/// spec seed. Equal inputs give bit-identical outputs.
pub fn realize_domain(
    spec: &DomainSpec,
    height: usize,
    width: usize,
) -> Result<(TransmissionMap, BackgroundLight)> {
    spec.validate()?;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let cycles = rng.gen_range(0.5..1.5);
    let (dy, dx) = (angle.sin(), angle.cos());

    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let u = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
            let v = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
            let r = 0.5 + 0.5 * (std::f64::consts::TAU * cycles * (u * dx + v * dy) + phase).sin();
            for ch in 0..3 {
                data.push(spec.base_transmission[ch] - spec.ramp_amplitude * r);
            }
        }
    }
    Ok((TransmissionMap { height, width, data }, spec.background))
}
