//! Bilateral-grid color transfer: a coarse lattice of local affine color
//! transforms, sliced to full resolution by a guidance map and applied per
//! pixel.
//!
//! `slice_grid` is the production kernel (tent weights reduce to a trilinear
//! lookup); `slice_grid_reference` is the literal triple sum over every cell
//! and serves as its ground truth.

pub mod bench;
pub mod net;
pub mod train;

use crate::error::{Error, Result};
use crate::image_model::Image;

pub const GRID_H: usize = 16;
pub const GRID_W: usize = 16;
pub const GRID_D: usize = 8;
/// 3x4 affine transform per cell: 3x3 color matrix plus bias column.
pub const CELL_COEFFS: usize = 12;

/// A `16 x 16 x 8` lattice whose cells each hold a 3x4 affine color
/// transform, stored row-major as `(i, j, k, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilateralGrid {
    pub data: Vec<f64>,
}

impl BilateralGrid {
    pub fn zeros() -> Self {
        BilateralGrid {
            data: vec![0.0; GRID_H * GRID_W * GRID_D * CELL_COEFFS],
        }
    }

    /// Every cell set to the same 3x4 matrix (row-major 12 coefficients).
    pub fn constant(cell: [f64; CELL_COEFFS]) -> Self {
        let mut g = Self::zeros();
        for c in g.data.chunks_exact_mut(CELL_COEFFS) {
            c.copy_from_slice(&cell);
        }
        g
    }

    /// Identity color mapping in every cell.
    pub fn identity() -> Self {
        Self::constant(IDENTITY_CELL)
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let base = ((i * GRID_W + j) * GRID_D + k) * CELL_COEFFS;
        &self.data[base..base + CELL_COEFFS]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let base = ((i * GRID_W + j) * GRID_D + k) * CELL_COEFFS;
        &mut self.data[base..base + CELL_COEFFS]
    }
}

/// Row-major `[1 0 0 0; 0 1 0 0; 0 0 1 0]`.
pub const IDENTITY_CELL: [f64; CELL_COEFFS] =
    [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Per-pixel scalar in `[0, 1]` selecting the grid's depth coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GuidanceMap {
    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        GuidanceMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("guidance value {v}")));
        }
        Ok(())
    }
}

/// Per-pixel 3x4 affine transform produced by slicing.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub height: usize,
    pub width: usize,
    /// `(y, x, coeff)` layout, 12 coefficients per pixel.
    pub data: Vec<f64>,
}

impl AffineField {
    pub fn new(height: usize, width: usize) -> Self {
        AffineField {
            height,
            width,
            data: vec![0.0; height * width * CELL_COEFFS],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * CELL_COEFFS;
        &self.data[base..base + CELL_COEFFS]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.width + x) * CELL_COEFFS;
        &mut self.data[base..base + CELL_COEFFS]
    }
}

#[inline]
fn tent(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Continuous grid coordinates of a pixel, clamped per axis to `[0, dim-1]`
/// so that tent weights always form a partition of unity.
#[inline]
pub(crate) fn grid_coords(
    y: usize,
    x: usize,
    g: f64,
    height: usize,
    width: usize,
) -> (f64, f64, f64) {
    let ci = (GRID_H as f64 / height as f64 * y as f64).clamp(0.0, (GRID_H - 1) as f64);
    let cj = (GRID_W as f64 / width as f64 * x as f64).clamp(0.0, (GRID_W - 1) as f64);
    let ck = (GRID_D as f64 * g).clamp(0.0, (GRID_D - 1) as f64);
    (ci, cj, ck)
}

#[inline]
pub(crate) fn axis_cells(coord: f64, dim: usize) -> (usize, usize, f64) {
    let i0 = (coord.floor() as usize).min(dim - 1);
    let i1 = (i0 + 1).min(dim - 1);
    let frac = coord - i0 as f64;
    (i0, i1, frac)
}

/// Trilinear slice of the grid at every pixel of the guidance map.
///
/// Within a cell octet the interpolation is evaluated as nested lerps
/// `a + t * (b - a)`, so a grid that is constant along an axis reproduces
/// that constant exactly.
pub fn slice_grid(grid: &BilateralGrid, guide: &GuidanceMap) -> AffineField {
    let (h, w) = (guide.height, guide.width);
    let mut field = AffineField::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (ci, cj, ck) = grid_coords(y, x, guide.get(y, x), h, w);
            let (i0, i1, fi) = axis_cells(ci, GRID_H);
            let (j0, j1, fj) = axis_cells(cj, GRID_W);
            let (k0, k1, fk) = axis_cells(ck, GRID_D);
            let out = field.pixel_mut(y, x);
            for c in 0..CELL_COEFFS {
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let c00 = lerp(grid.cell(i0, j0, k0)[c], grid.cell(i0, j0, k1)[c], fk);
                let c01 = lerp(grid.cell(i0, j1, k0)[c], grid.cell(i0, j1, k1)[c], fk);
                let c10 = lerp(grid.cell(i1, j0, k0)[c], grid.cell(i1, j0, k1)[c], fk);
                let c11 = lerp(grid.cell(i1, j1, k0)[c], grid.cell(i1, j1, k1)[c], fk);
                let c0 = lerp(c00, c01, fj);
                let c1 = lerp(c10, c11, fj);
                out[c] = lerp(c0, c1, fi);
            }
        }
    }
    field
}

/// Literal triple sum over all cells with tent weights; the ground truth
/// for `slice_grid`, intentionally unoptimized.
pub fn slice_grid_reference(grid: &BilateralGrid, guide: &GuidanceMap) -> AffineField {
    let (h, w) = (guide.height, guide.width);
    let mut field = AffineField::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (ci, cj, ck) = grid_coords(y, x, guide.get(y, x), h, w);
            let out = field.pixel_mut(y, x);
            for i in 0..GRID_H {
                let wi = tent(ci - i as f64);
                for j in 0..GRID_W {
                    let wj = tent(cj - j as f64);
                    for k in 0..GRID_D {
                        let wk = tent(ck - k as f64);
                        let wgt = wi * wj * wk;
                        let cell = grid.cell(i, j, k);
                        for c in 0..CELL_COEFFS {
                            out[c] += wgt * cell[c];
                        }
                    }
                }
            }
        }
    }
    field
}

/// Applies the per-pixel affine transform: `O = Am * C + Ab`.
///
/// The output is not clamped; clamping happens only at file write.
pub fn apply_affine(content: &Image, field: &AffineField) -> Result<Image> {
    if content.height != field.height || content.width != field.width {
        return Err(Error::shape(
            content.shape_str(),
            format!("{}x{}", field.height, field.width),
        ));
    }
    let mut out = Image::new(content.height, content.width);
    for y in 0..content.height {
        for x in 0..content.width {
            let a = field.pixel(y, x);
            let c = [content.get(y, x, 0), content.get(y, x, 1), content.get(y, x, 2)];
            for row in 0..3 {
                let r = &a[row * 4..row * 4 + 4];
                out.set(y, x, row, r[0] * c[0] + r[1] * c[1] + r[2] * c[2] + r[3]);
            }
        }
    }
    Ok(out)
}

/// Gradient of `apply_affine` with respect to the field, given `dL/dO`.
pub(crate) fn apply_affine_backward_field(content: &Image, d_out: &Image) -> AffineField {
    let mut d_field = AffineField::new(content.height, content.width);
    for y in 0..content.height {
        for x in 0..content.width {
            let c = [content.get(y, x, 0), content.get(y, x, 1), content.get(y, x, 2)];
            let df = d_field.pixel_mut(y, x);
            for row in 0..3 {
                let g = d_out.get(y, x, row);
                df[row * 4] = g * c[0];
                df[row * 4 + 1] = g * c[1];
                df[row * 4 + 2] = g * c[2];
                df[row * 4 + 3] = g;
            }
        }
    }
    d_field
}

/// Backward pass of `slice_grid`: scatters field gradients into the grid
/// and computes the guidance gradient from the depth-axis derivative.
pub(crate) fn slice_grid_backward(
    grid: &BilateralGrid,
    guide: &GuidanceMap,
    d_field: &AffineField,
) -> (BilateralGrid, GuidanceGradient) {
    let (h, w) = (guide.height, guide.width);
    let mut d_grid = BilateralGrid::zeros();
    let mut d_guide = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = guide.get(y, x);
            let (ci, cj, ck) = grid_coords(y, x, g, h, w);
            let (i0, i1, fi) = axis_cells(ci, GRID_H);
            let (j0, j1, fj) = axis_cells(cj, GRID_W);
            let (k0, k1, fk) = axis_cells(ck, GRID_D);
            let df = d_field.pixel(y, x);
            // d(ck)/dg is zero where the depth coordinate clamps
            let zk = GRID_D as f64 * g;
            let dk_dg = if (0.0..=(GRID_D - 1) as f64).contains(&zk) {
                GRID_D as f64
            } else {
                0.0
            };
            let mut dg = 0.0;
            for c in 0..CELL_COEFFS {
                let go = df[c];
                if go == 0.0 {
                    continue;
                }
                let (wi0, wi1) = (1.0 - fi, fi);
                let (wj0, wj1) = (1.0 - fj, fj);
                let (wk0, wk1) = (1.0 - fk, fk);
                for (i, wi) in [(i0, wi0), (i1, wi1)] {
                    for (j, wj) in [(j0, wj0), (j1, wj1)] {
                        d_grid.cell_mut(i, j, k0)[c] += go * wi * wj * wk0;
                        if k1 != k0 {
                            d_grid.cell_mut(i, j, k1)[c] += go * wi * wj * wk1;
                        }
                        // derivative of the k-lerp w.r.t. fk
                        let dv_dfk = grid.cell(i, j, k1)[c] - grid.cell(i, j, k0)[c];
                        dg += go * wi * wj * dv_dfk * dk_dg;
                    }
                }
            }
            d_guide[y * w + x] = dg;
        }
    }
    (
        d_grid,
        GuidanceGradient {
            height: h,
            width: w,
            data: d_guide,
        },
    )
}

/// Gradient of a loss with respect to each guidance pixel.
#[derive(Debug, Clone)]
pub struct GuidanceGradient {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

const GRID_MAGIC: &[u8; 4] = b"BGRD";
const GRID_VERSION: u16 = 1;

/// Serializes the grid: magic `BGRD`, version, dimensions, then cell
/// coefficients as little-endian f32 in `(i, j, k, row, col)` order.
pub fn serialize_grid(grid: &BilateralGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.data.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for dim in [GRID_H, GRID_W, GRID_D, 3usize, 4usize] {
        out.extend_from_slice(&(dim as u16).to_le_bytes());
    }
    for v in &grid.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses a `BGRD` payload; only the 16x16x8 profile with 3x4 cells is
/// accepted.
pub fn deserialize_grid(bytes: &[u8]) -> Result<BilateralGrid> {
    if bytes.len() < 16 {
        return Err(Error::GridFormat("truncated header".into()));
    }
    if &bytes[0..4] != GRID_MAGIC {
        return Err(Error::GridFormat("bad magic".into()));
    }
    let u16_at = |off: usize| u16::from_le_bytes([bytes[off], bytes[off + 1]]);
    if u16_at(4) != GRID_VERSION {
        return Err(Error::GridFormat(format!("unsupported version {}", u16_at(4))));
    }
    let dims = [u16_at(6), u16_at(8), u16_at(10), u16_at(12), u16_at(14)];
    let expect = [GRID_H as u16, GRID_W as u16, GRID_D as u16, 3, 4];
    if dims != expect {
        return Err(Error::GridFormat(format!(
            "dimension mismatch: got {dims:?}, expected {expect:?}"
        )));
    }
    let n = GRID_H * GRID_W * GRID_D * CELL_COEFFS;
    let payload = &bytes[16..];
    if payload.len() != n * 4 {
        return Err(Error::GridFormat(format!(
            "truncated payload: {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(BilateralGrid { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_grid(rng: &mut ChaCha8Rng) -> BilateralGrid {
        let mut g = BilateralGrid::zeros();
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        g
    }

    pub(crate) fn random_guide(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GuidanceMap {
        GuidanceMap {
            height: h,
            width: w,
            data: (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        }
    }

    #[test]
    fn constant_grid_slices_to_constant_field_exactly() {
        let cell = [0.3, -0.7, 0.11, 0.9, 1.7, 0.0, -2.5, 0.25, 0.5, 0.5, 0.5, 1.0];
        let grid = BilateralGrid::constant(cell);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let guide = random_guide(9, 13, &mut rng);
        let field = slice_grid(&grid, &guide);
        for y in 0..9 {
            for x in 0..13 {
                assert_eq!(field.pixel(y, x), &cell);
            }
        }
    }

    #[test]
    fn identity_grid_applies_as_identity() {
        let grid = BilateralGrid::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let guide = random_guide(7, 5, &mut rng);
        let content = Image::from_fn(7, 5, |y, x, c| ((y * 5 + x) * 3 + c) as f64 / 104.0);
        let field = slice_grid(&grid, &guide);
        let out = apply_affine(&content, &field).unwrap();
        assert_eq!(out, content);
    }

    #[test]
    fn slice_matches_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let grid = random_grid(&mut rng);
            let h = rng.gen_range(1..40);
            let w = rng.gen_range(1..40);
            let guide = random_guide(h, w, &mut rng);
            let fast = slice_grid(&grid, &guide);
            let slow = slice_grid_reference(&grid, &guide);
            let max = fast
                .data
                .iter()
                .zip(slow.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1e-6, "max diff {max}");
        }
    }

    #[test]
    fn slicing_is_linear_in_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = random_grid(&mut rng);
        let g2 = random_grid(&mut rng);
        let guide = random_guide(6, 6, &mut rng);
        let alpha = 0.37;
        let mut combo = BilateralGrid::zeros();
        for i in 0..combo.data.len() {
            combo.data[i] = alpha * g1.data[i] + g2.data[i];
        }
        let lhs = slice_grid(&combo, &guide);
        let f1 = slice_grid(&g1, &guide);
        let f2 = slice_grid(&g2, &guide);
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (alpha * f1.data[i] + f2.data[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn guidance_changes_are_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng);
        let mut guide = random_guide(8, 8, &mut rng);
        let base = slice_grid(&grid, &guide);
        guide.data[3 * 8 + 4] = (guide.data[3 * 8 + 4] + 0.31) % 1.0;
        let changed = slice_grid(&grid, &guide);
        for y in 0..8 {
            for x in 0..8 {
                if (y, x) != (3, 4) {
                    assert_eq!(base.pixel(y, x), changed.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn apply_affine_zero_matrix_gives_bias() {
        let mut field = AffineField::new(2, 2);
        for y in 0..2 {
            for x in 0..2 {
                let p = field.pixel_mut(y, x);
                p[3] = 0.1;
                p[7] = 0.2;
                p[11] = 0.3;
            }
        }
        let content = Image::from_fn(2, 2, |_, _, _| 0.77);
        let out = apply_affine(&content, &field).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(y, x, 0), 0.1);
                assert_eq!(out.get(y, x, 1), 0.2);
                assert_eq!(out.get(y, x, 2), 0.3);
            }
        }
    }

    #[test]
    fn apply_affine_single_pixel_value() {
        let mut field = AffineField::new(1, 1);
        let p = field.pixel_mut(0, 0);
        p.copy_from_slice(&[0.5, 0.0, 0.0, 0.1, 0.0, 2.0, 0.0, 0.1, 0.0, 0.0, 1.0, 0.1]);
        let mut content = Image::new(1, 1);
        content.data.copy_from_slice(&[1.0, 0.0, 0.0]);
        let out = apply_affine(&content, &field).unwrap();
        assert!((out.get(0, 0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 0, 1) - 0.1).abs() < 1e-15);
        assert!((out.get(0, 0, 2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut grid = BilateralGrid::zeros();
        for v in grid.data.iter_mut() {
            // f32-exact values so the f64 -> f32 -> f64 trip is bitwise
            *v = rng.gen_range(-2.0f32..2.0f32) as f64;
        }
        let bytes = serialize_grid(&grid);
        let back = deserialize_grid(&bytes).unwrap();
        assert_eq!(back.data, grid.data);
        assert_eq!(serialize_grid(&back), bytes);
    }

    #[test]
    fn grid_deserialize_rejects_bad_input() {
        let grid = BilateralGrid::identity();
        let bytes = serialize_grid(&grid);
        assert!(deserialize_grid(&bytes[..bytes.len() - 4]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(deserialize_grid(&bad_magic).is_err());
        let mut bad_depth = bytes.clone();
        bad_depth[10] = 7;
        assert!(deserialize_grid(&bad_depth).is_err());
        assert!(deserialize_grid(&bytes[..8]).is_err());
    }
}
