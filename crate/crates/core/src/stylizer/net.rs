//! The grid-predicting stylizer network.
//!
//! Dataflow: a fixed seeded extractor provides four taps (strides 1, 2, 4,
//! 8) of the low-resolution content image. Three splatting blocks (stride-2
//! conv, conditional instance norm, stride-1 conv) consume tap 1 and merge
//! the deeper taps after their own CIN; two trailing convolutions reach the
//! 16x16 grid resolution. A fully convolutional local path and a
//! conv+fully-connected global path are fused by a pointwise convolution
//! into the 16x16x96 coefficient map. A pointwise sigmoid stack on the
//! full-resolution image predicts the guidance map that drives slicing.

use super::{
    apply_affine, apply_affine_backward_field, slice_grid, slice_grid_backward, BilateralGrid,
    GuidanceMap, GRID_D, GRID_H, GRID_W, IDENTITY_CELL,
};
use crate::error::{Error, Result};
use crate::image_model::Image;
use crate::nn::{
    leaky_relu, leaky_relu_backward, leaky_relu_vec, leaky_relu_vec_backward, sigmoid, Cin,
    CinCache, CinGrads, Conv2d, Conv2dGrads, Linear, LinearGrads, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Low-resolution input edge; three stride-2 splat blocks plus one stride-2
/// trailing convolution take it to the 16-cell grid resolution.
pub const LOW_RES: usize = 256;

/// Guidance auxiliary network widths (pointwise convolutions).
const GUIDANCE_WIDTHS: [usize; 4] = [3, 8, 8, 1];

/// Architecture knobs. Tap channels double per stage by default; splat
/// block widths are tied to the tap they merge with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylizerConfig {
    pub n_styles: usize,
    pub tap_channels: [usize; 4],
    pub global_fc: usize,
}

impl Default for StylizerConfig {
    fn default() -> Self {
        StylizerConfig {
            n_styles: 2,
            tap_channels: [8, 16, 32, 64],
            global_fc: 256,
        }
    }
}

impl StylizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_styles == 0 {
            return Err(Error::Config("need at least one style".into()));
        }
        if self.tap_channels.iter().any(|c| *c == 0) || self.global_fc == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    fn trunk(&self) -> usize {
        self.tap_channels[3]
    }
}

#[derive(Debug, Clone)]
pub struct StylizerNet {
    pub config: StylizerConfig,
    /// Frozen feature extractor; taps at strides 1, 2, 4, 8.
    pub extractor: Vec<Conv2d>,
    pub splat_down: Vec<Conv2d>,
    pub splat_cin: Vec<Cin>,
    pub tap_cin: Vec<Cin>,
    pub splat_same: Vec<Conv2d>,
    pub post: Vec<Conv2d>,
    pub local: Vec<Conv2d>,
    pub global_conv: Vec<Conv2d>,
    pub global_fc1: Linear,
    pub global_fc2: Linear,
    pub fusion: Conv2d,
    pub guidance: Vec<Conv2d>,
}

impl StylizerNet {
    pub fn seeded(config: StylizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = config.tap_channels;
        let trunk = config.trunk();
        let extractor = vec![
            Conv2d::seeded(3, t[0], 3, 1, &mut rng),
            Conv2d::seeded(t[0], t[1], 3, 2, &mut rng),
            Conv2d::seeded(t[1], t[2], 3, 2, &mut rng),
            Conv2d::seeded(t[2], t[3], 3, 2, &mut rng),
        ];
        let splat_down = vec![
            Conv2d::seeded(t[0], t[1], 3, 2, &mut rng),
            Conv2d::seeded(t[1], t[2], 3, 2, &mut rng),
            Conv2d::seeded(t[2], t[3], 3, 2, &mut rng),
        ];
        let splat_cin = vec![
            Cin::seeded(t[1], config.n_styles, &mut rng),
            Cin::seeded(t[2], config.n_styles, &mut rng),
            Cin::seeded(t[3], config.n_styles, &mut rng),
        ];
        let tap_cin = vec![
            Cin::seeded(t[1], config.n_styles, &mut rng),
            Cin::seeded(t[2], config.n_styles, &mut rng),
            Cin::seeded(t[3], config.n_styles, &mut rng),
        ];
        let splat_same = vec![
            Conv2d::seeded(t[1], t[1], 3, 1, &mut rng),
            Conv2d::seeded(t[2], t[2], 3, 1, &mut rng),
            Conv2d::seeded(t[3], t[3], 3, 1, &mut rng),
        ];
        let post = vec![
            Conv2d::seeded(trunk, trunk, 3, 2, &mut rng),
            Conv2d::seeded(trunk, trunk, 3, 1, &mut rng),
        ];
        let local = vec![
            Conv2d::seeded(trunk, trunk, 3, 1, &mut rng),
            Conv2d::seeded(trunk, trunk, 3, 1, &mut rng),
        ];
        let global_conv = vec![
            Conv2d::seeded(trunk, trunk, 3, 2, &mut rng),
            Conv2d::seeded(trunk, trunk, 3, 2, &mut rng),
        ];
        let grid_side_after_global = GRID_H / 4;
        let global_fc1 = Linear::seeded(
            grid_side_after_global * grid_side_after_global * trunk,
            config.global_fc,
            &mut rng,
        );
        let global_fc2 = Linear::seeded(config.global_fc, trunk, &mut rng);
        let fusion = Conv2d::seeded(trunk, GRID_D * 12, 1, 1, &mut rng);
        let guidance = (0..3)
            .map(|i| Conv2d::seeded(GUIDANCE_WIDTHS[i], GUIDANCE_WIDTHS[i + 1], 1, 1, &mut rng))
            .collect();
        Ok(StylizerNet {
            config,
            extractor,
            splat_down,
            splat_cin,
            tap_cin,
            splat_same,
            post,
            local,
            global_conv,
            global_fc1,
            global_fc2,
            fusion,
            guidance,
        })
    }

    /// Forces the predicted grid to the identity transform for every input.
    pub fn set_identity_fusion(&mut self) {
        for w in self.fusion.weight.iter_mut() {
            *w = 0.0;
        }
        for k in 0..GRID_D {
            self.fusion.bias[k * 12..(k + 1) * 12].copy_from_slice(&IDENTITY_CELL);
        }
    }

    /// Extractor taps with the intermediate pre-activation maps cached for
    /// the input-gradient path.
    pub(crate) fn extractor_taps_traced(&self, img: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut taps = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        let mut cur = img.clone();
        for conv in &self.extractor {
            let z = conv.forward(&cur);
            let a = leaky_relu(&z);
            pre.push(z);
            taps.push(a.clone());
            cur = a;
        }
        (taps, pre)
    }

    /// Tap features of an image (used both as the splat-path input and as
    /// the perceptual representation for the content/style objectives).
    pub fn extractor_taps(&self, img: &Image) -> Vec<Tensor> {
        self.extractor_taps_traced(&Tensor::from_image(img)).0
    }

    /// Gradient with respect to the extractor input, given per-tap output
    /// gradients. Extractor parameters stay frozen.
    pub(crate) fn extractor_backward_input(
        &self,
        input: &Tensor,
        taps_pre: &[Tensor],
        taps: &[Tensor],
        d_taps: &[Option<Tensor>],
    ) -> Tensor {
        let mut d_next: Option<Tensor> = None;
        for stage in (0..4).rev() {
            let mut d_tap = match d_next.take() {
                Some(d) => d,
                None => Tensor::zeros(taps[stage].h, taps[stage].w, taps[stage].c),
            };
            if let Some(extra) = &d_taps[stage] {
                d_tap = d_tap.add(extra);
            }
            let dz = leaky_relu_backward(&taps_pre[stage], &d_tap);
            let prev = if stage == 0 {
                input
            } else {
                &taps[stage - 1]
            };
            let mut scratch = self.extractor[stage].grads_zero();
            let dx = self.extractor[stage]
                .backward(prev, &dz, &mut scratch, true)
                .expect("input gradient requested");
            d_next = Some(dx);
        }
        d_next.unwrap()
    }

    /// Guidance map of a full-resolution image.
    pub fn guidance_forward(&self, content: &Image) -> GuidanceMap {
        self.guidance_traced(&Tensor::from_image(content)).0
    }

    fn guidance_traced(&self, x: &Tensor) -> (GuidanceMap, GuidanceTrace) {
        let z1 = self.guidance[0].forward(x);
        let a1 = leaky_relu(&z1);
        let z2 = self.guidance[1].forward(&a1);
        let a2 = leaky_relu(&z2);
        let z3 = self.guidance[2].forward(&a2);
        let data: Vec<f64> = z3.data.iter().map(|v| sigmoid(*v)).collect();
        (
            GuidanceMap {
                height: x.h,
                width: x.w,
                data,
            },
            GuidanceTrace { z1, a1, z2, a2 },
        )
    }

    /// Full pipeline: grid prediction from the low-resolution copy, guidance
    /// from the full-resolution image, slicing, and the affine application.
    pub fn forward(&self, c_low: &Image, c_full: &Image, style: usize) -> Result<StylizerOutput> {
        let trace = self.forward_traced(c_low, c_full, style)?;
        Ok(StylizerOutput {
            grid: trace.grid.clone(),
            guidance: trace.guidance.clone(),
            output: trace.output.clone(),
        })
    }

    pub fn forward_traced(
        &self,
        c_low: &Image,
        c_full: &Image,
        style: usize,
    ) -> Result<StylizerTrace> {
        if c_low.height != LOW_RES || c_low.width != LOW_RES {
            return Err(Error::Config(format!(
                "low-resolution input must be {LOW_RES}x{LOW_RES}, got {}",
                c_low.shape_str()
            )));
        }
        if style >= self.config.n_styles {
            return Err(Error::UnknownStyle(style));
        }
        let low = Tensor::from_image(c_low);
        let (taps, _) = self.extractor_taps_traced(&low);

        let mut blocks = Vec::with_capacity(3);
        let mut cur = taps[0].clone();
        for b in 0..3 {
            let down_in = cur;
            let down_out = self.splat_down[b].forward(&down_in);
            let (cin_out, cin_cache) = self.splat_cin[b].forward(&down_out, style)?;
            let (tap_out, tap_cache) = self.tap_cin[b].forward(&taps[b + 1], style)?;
            let summed = cin_out.add(&tap_out);
            let act1 = leaky_relu(&summed);
            let same_out = self.splat_same[b].forward(&act1);
            let act2 = leaky_relu(&same_out);
            cur = act2.clone();
            blocks.push(SplatTrace {
                down_in,
                cin_cache,
                tap_cache,
                summed,
                act1,
                same_out,
                act2,
            });
        }

        let p1 = self.post[0].forward(&blocks[2].act2);
        let a_p1 = leaky_relu(&p1);
        let p2 = self.post[1].forward(&a_p1);
        let a_p2 = leaky_relu(&p2);
        debug_assert_eq!((a_p2.h, a_p2.w), (GRID_H, GRID_W));

        let l1 = self.local[0].forward(&a_p2);
        let a_l1 = leaky_relu(&l1);
        let local_out = self.local[1].forward(&a_l1);

        let g1 = self.global_conv[0].forward(&a_p2);
        let a_g1 = leaky_relu(&g1);
        let g2 = self.global_conv[1].forward(&a_g1);
        let a_g2 = leaky_relu(&g2);
        let fc1 = self.global_fc1.forward(&a_g2.data);
        let a_fc1 = leaky_relu_vec(&fc1);
        let gvec = self.global_fc2.forward(&a_fc1);

        let mut fused_pre = local_out;
        for px in fused_pre.data.chunks_exact_mut(self.config.trunk()) {
            for (v, g) in px.iter_mut().zip(gvec.iter()) {
                *v += g;
            }
        }
        let fused_act = leaky_relu(&fused_pre);
        let grid_map = self.fusion.forward(&fused_act);
        // 16x16x96 map and the grid share one linear layout
        let grid = BilateralGrid {
            data: grid_map.data,
        };

        let full = Tensor::from_image(c_full);
        let (guidance, guidance_trace) = self.guidance_traced(&full);
        let field = slice_grid(&grid, &guidance);
        let output = apply_affine(c_full, &field)?;

        Ok(StylizerTrace {
            style,
            taps,
            blocks,
            p1,
            a_p1,
            p2,
            a_p2,
            l1,
            a_l1,
            g1,
            a_g1,
            g2,
            a_g2,
            fc1,
            a_fc1,
            fused_pre,
            fused_act,
            grid,
            full,
            guidance_trace,
            guidance,
            output,
        })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the stylized image) and an
    /// extra direct grid gradient (e.g. from the smoothness regularizer)
    /// into all trainable parameters.
    pub fn backward(
        &self,
        trace: &StylizerTrace,
        d_output: &Image,
        d_grid_extra: Option<&BilateralGrid>,
        grads: &mut StylizerGrads,
    ) {
        let style = trace.style;
        let full_img = trace.full.to_image();
        let d_field = apply_affine_backward_field(&full_img, d_output);
        let (mut d_grid, d_guide) = slice_grid_backward(&trace.grid, &trace.guidance, &d_field);
        if let Some(extra) = d_grid_extra {
            for (a, b) in d_grid.data.iter_mut().zip(extra.data.iter()) {
                *a += b;
            }
        }

        // guidance stack
        let gt = &trace.guidance_trace;
        let mut d_z3 = Tensor::zeros(trace.full.h, trace.full.w, 1);
        for (i, dv) in d_guide.data.iter().enumerate() {
            let s = trace.guidance.data[i];
            d_z3.data[i] = dv * s * (1.0 - s);
        }
        let d_a2 = self.guidance[2]
            .backward(&gt.a2, &d_z3, &mut grads.guidance[2], true)
            .unwrap();
        let d_z2 = leaky_relu_backward(&gt.z2, &d_a2);
        let d_a1 = self.guidance[1]
            .backward(&gt.a1, &d_z2, &mut grads.guidance[1], true)
            .unwrap();
        let d_z1 = leaky_relu_backward(&gt.z1, &d_a1);
        self.guidance[0].backward(&trace.full, &d_z1, &mut grads.guidance[0], false);

        // fusion and the two paths
        let d_grid_map = Tensor {
            h: GRID_H,
            w: GRID_W,
            c: GRID_D * 12,
            data: d_grid.data,
        };
        let d_fused_act = self
            .fusion
            .backward(&trace.fused_act, &d_grid_map, &mut grads.fusion, true)
            .unwrap();
        let d_fused_pre = leaky_relu_backward(&trace.fused_pre, &d_fused_act);
        // broadcast add: local grad passes through; global grad sums over pixels
        let trunk = self.config.trunk();
        let mut d_gvec = vec![0.0; trunk];
        for px in d_fused_pre.data.chunks_exact(trunk) {
            for (g, v) in d_gvec.iter_mut().zip(px.iter()) {
                *g += v;
            }
        }

        // global path
        let d_a_fc1 = self
            .global_fc2
            .backward(&trace.a_fc1, &d_gvec, &mut grads.global_fc2);
        let d_fc1 = leaky_relu_vec_backward(&trace.fc1, &d_a_fc1);
        let d_flat = self
            .global_fc1
            .backward(&trace.a_g2.data, &d_fc1, &mut grads.global_fc1);
        let d_a_g2 = Tensor {
            h: trace.a_g2.h,
            w: trace.a_g2.w,
            c: trace.a_g2.c,
            data: d_flat,
        };
        let d_g2 = leaky_relu_backward(&trace.g2, &d_a_g2);
        let d_a_g1 = self.global_conv[1]
            .backward(&trace.a_g1, &d_g2, &mut grads.global_conv[1], true)
            .unwrap();
        let d_g1 = leaky_relu_backward(&trace.g1, &d_a_g1);
        let d_a_p2_global = self.global_conv[0]
            .backward(&trace.a_p2, &d_g1, &mut grads.global_conv[0], true)
            .unwrap();

        // local path
        let d_l2 = d_fused_pre;
        let d_a_l1 = self.local[1]
            .backward(&trace.a_l1, &d_l2, &mut grads.local[1], true)
            .unwrap();
        let d_l1 = leaky_relu_backward(&trace.l1, &d_a_l1);
        let d_a_p2_local = self.local[0]
            .backward(&trace.a_p2, &d_l1, &mut grads.local[0], true)
            .unwrap();

        let d_a_p2 = d_a_p2_local.add(&d_a_p2_global);
        let d_p2 = leaky_relu_backward(&trace.p2, &d_a_p2);
        let d_a_p1 = self.post[1]
            .backward(&trace.a_p1, &d_p2, &mut grads.post[1], true)
            .unwrap();
        let d_p1 = leaky_relu_backward(&trace.p1, &d_a_p1);
        let mut d_block_out = self.post[0]
            .backward(&trace.blocks[2].act2, &d_p1, &mut grads.post[0], true)
            .unwrap();

        // splat blocks, deepest first
        for b in (0..3).rev() {
            let blk = &trace.blocks[b];
            let d_same = leaky_relu_backward(&blk.same_out, &d_block_out);
            let d_act1 = self.splat_same[b]
                .backward(&blk.act1, &d_same, &mut grads.splat_same[b], true)
                .unwrap();
            let d_sum = leaky_relu_backward(&blk.summed, &d_act1);
            // tap branch ends in the frozen extractor
            self.tap_cin[b].backward(&blk.tap_cache, &d_sum, style, &mut grads.tap_cin[b]);
            let d_down = self.splat_cin[b].backward(&blk.cin_cache, &d_sum, style, &mut grads.splat_cin[b]);
            let want_dx = b > 0;
            let dx = self.splat_down[b].backward(&blk.down_in, &d_down, &mut grads.splat_down[b], want_dx);
            if let Some(dx) = dx {
                d_block_out = dx;
            }
        }
    }
}

/// Splat block activations cached for the backward pass.
#[derive(Debug, Clone)]
pub struct SplatTrace {
    down_in: Tensor,
    cin_cache: CinCache,
    tap_cache: CinCache,
    summed: Tensor,
    act1: Tensor,
    same_out: Tensor,
    act2: Tensor,
}

#[derive(Debug, Clone)]
pub struct GuidanceTrace {
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2: Tensor,
}

/// The three user-facing stages of one forward pass.
#[derive(Debug, Clone)]
pub struct StylizerOutput {
    pub grid: BilateralGrid,
    pub guidance: GuidanceMap,
    pub output: Image,
}

/// Complete forward state of one traced pass.
#[derive(Debug, Clone)]
pub struct StylizerTrace {
    pub style: usize,
    pub taps: Vec<Tensor>,
    blocks: Vec<SplatTrace>,
    p1: Tensor,
    a_p1: Tensor,
    p2: Tensor,
    pub a_p2: Tensor,
    l1: Tensor,
    a_l1: Tensor,
    g1: Tensor,
    a_g1: Tensor,
    g2: Tensor,
    a_g2: Tensor,
    fc1: Vec<f64>,
    a_fc1: Vec<f64>,
    fused_pre: Tensor,
    fused_act: Tensor,
    pub grid: BilateralGrid,
    pub full: Tensor,
    guidance_trace: GuidanceTrace,
    pub guidance: GuidanceMap,
    pub output: Image,
}

impl StylizerTrace {
    /// Gradient of a perceptual objective on the stylized image: per-tap
    /// feature gradients are pulled back through the frozen extractor.
    pub fn output_feature_backward(
        &self,
        net: &StylizerNet,
        d_taps: [Option<Tensor>; 4],
    ) -> Tensor {
        let out_t = Tensor::from_image(&self.output);
        let (taps, pre) = net.extractor_taps_traced(&out_t);
        net.extractor_backward_input(&out_t, &pre, &taps, &d_taps)
    }
}

/// Gradients for every trainable parameter (the extractor is frozen).
#[derive(Debug, Clone)]
pub struct StylizerGrads {
    pub splat_down: Vec<Conv2dGrads>,
    pub splat_cin: Vec<CinGrads>,
    pub tap_cin: Vec<CinGrads>,
    pub splat_same: Vec<Conv2dGrads>,
    pub post: Vec<Conv2dGrads>,
    pub local: Vec<Conv2dGrads>,
    pub global_conv: Vec<Conv2dGrads>,
    pub global_fc1: LinearGrads,
    pub global_fc2: LinearGrads,
    pub fusion: Conv2dGrads,
    pub guidance: Vec<Conv2dGrads>,
}

impl StylizerGrads {
    pub fn zeros(net: &StylizerNet) -> Self {
        StylizerGrads {
            splat_down: net.splat_down.iter().map(Conv2d::grads_zero).collect(),
            splat_cin: net.splat_cin.iter().map(Cin::grads_zero).collect(),
            tap_cin: net.tap_cin.iter().map(Cin::grads_zero).collect(),
            splat_same: net.splat_same.iter().map(Conv2d::grads_zero).collect(),
            post: net.post.iter().map(Conv2d::grads_zero).collect(),
            local: net.local.iter().map(Conv2d::grads_zero).collect(),
            global_conv: net.global_conv.iter().map(Conv2d::grads_zero).collect(),
            global_fc1: net.global_fc1.grads_zero(),
            global_fc2: net.global_fc2.grads_zero(),
            fusion: net.fusion.grads_zero(),
            guidance: net.guidance.iter().map(Conv2d::grads_zero).collect(),
        }
    }

    pub fn vecs(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.splat_down {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        for g in &self.splat_cin {
            out.push(&g.gamma);
            out.push(&g.beta);
        }
        for g in &self.tap_cin {
            out.push(&g.gamma);
            out.push(&g.beta);
        }
        for g in &self.splat_same {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        for g in &self.post {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        for g in &self.local {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        for g in &self.global_conv {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out.push(&self.global_fc1.weight);
        out.push(&self.global_fc1.bias);
        out.push(&self.global_fc2.weight);
        out.push(&self.global_fc2.bias);
        out.push(&self.fusion.weight);
        out.push(&self.fusion.bias);
        for g in &self.guidance {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out
    }
}

impl StylizerNet {
    /// Mutable views of the trainable parameter vectors; order matches
    /// [`StylizerGrads::vecs`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for c in self.splat_down.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.splat_cin.iter_mut() {
            out.push(&mut c.gamma);
            out.push(&mut c.beta);
        }
        for c in self.tap_cin.iter_mut() {
            out.push(&mut c.gamma);
            out.push(&mut c.beta);
        }
        for c in self.splat_same.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.post.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.local.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.global_conv.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.global_fc1.weight);
        out.push(&mut self.global_fc1.bias);
        out.push(&mut self.global_fc2.weight);
        out.push(&mut self.global_fc2.bias);
        out.push(&mut self.fusion.weight);
        out.push(&mut self.fusion.bias);
        for c in self.guidance.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    fn named_vecs(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = Vec::new();
        for (i, c) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &c.weight));
            out.push((format!("extractor.{i}.bias"), &c.bias));
        }
        for (i, c) in self.splat_down.iter().enumerate() {
            out.push((format!("splat.{i}.down.weight"), &c.weight));
            out.push((format!("splat.{i}.down.bias"), &c.bias));
        }
        for (i, c) in self.splat_cin.iter().enumerate() {
            out.push((format!("splat.{i}.cin.gamma"), &c.gamma));
            out.push((format!("splat.{i}.cin.beta"), &c.beta));
        }
        for (i, c) in self.tap_cin.iter().enumerate() {
            out.push((format!("splat.{i}.tap_cin.gamma"), &c.gamma));
            out.push((format!("splat.{i}.tap_cin.beta"), &c.beta));
        }
        for (i, c) in self.splat_same.iter().enumerate() {
            out.push((format!("splat.{i}.same.weight"), &c.weight));
            out.push((format!("splat.{i}.same.bias"), &c.bias));
        }
        for (i, c) in self.post.iter().enumerate() {
            out.push((format!("post.{i}.weight"), &c.weight));
            out.push((format!("post.{i}.bias"), &c.bias));
        }
        for (i, c) in self.local.iter().enumerate() {
            out.push((format!("local.{i}.weight"), &c.weight));
            out.push((format!("local.{i}.bias"), &c.bias));
        }
        for (i, c) in self.global_conv.iter().enumerate() {
            out.push((format!("global.conv.{i}.weight"), &c.weight));
            out.push((format!("global.conv.{i}.bias"), &c.bias));
        }
        out.push(("global.fc1.weight".into(), &self.global_fc1.weight));
        out.push(("global.fc1.bias".into(), &self.global_fc1.bias));
        out.push(("global.fc2.weight".into(), &self.global_fc2.weight));
        out.push(("global.fc2.bias".into(), &self.global_fc2.bias));
        out.push(("fusion.weight".into(), &self.fusion.weight));
        out.push(("fusion.bias".into(), &self.fusion.bias));
        for (i, c) in self.guidance.iter().enumerate() {
            out.push((format!("guidance.{i}.weight"), &c.weight));
            out.push((format!("guidance.{i}.bias"), &c.bias));
        }
        out
    }

    fn named_vecs_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        // mirror of named_vecs; kept adjacent so the orders cannot drift
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, c) in self.extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.weight"), &mut c.weight));
            out.push((format!("extractor.{i}.bias"), &mut c.bias));
        }
        for (i, c) in self.splat_down.iter_mut().enumerate() {
            out.push((format!("splat.{i}.down.weight"), &mut c.weight));
            out.push((format!("splat.{i}.down.bias"), &mut c.bias));
        }
        for (i, c) in self.splat_cin.iter_mut().enumerate() {
            out.push((format!("splat.{i}.cin.gamma"), &mut c.gamma));
            out.push((format!("splat.{i}.cin.beta"), &mut c.beta));
        }
        for (i, c) in self.tap_cin.iter_mut().enumerate() {
            out.push((format!("splat.{i}.tap_cin.gamma"), &mut c.gamma));
            out.push((format!("splat.{i}.tap_cin.beta"), &mut c.beta));
        }
        for (i, c) in self.splat_same.iter_mut().enumerate() {
            out.push((format!("splat.{i}.same.weight"), &mut c.weight));
            out.push((format!("splat.{i}.same.bias"), &mut c.bias));
        }
        for (i, c) in self.post.iter_mut().enumerate() {
            out.push((format!("post.{i}.weight"), &mut c.weight));
            out.push((format!("post.{i}.bias"), &mut c.bias));
        }
        for (i, c) in self.local.iter_mut().enumerate() {
            out.push((format!("local.{i}.weight"), &mut c.weight));
            out.push((format!("local.{i}.bias"), &mut c.bias));
        }
        for (i, c) in self.global_conv.iter_mut().enumerate() {
            out.push((format!("global.conv.{i}.weight"), &mut c.weight));
            out.push((format!("global.conv.{i}.bias"), &mut c.bias));
        }
        out.push(("global.fc1.weight".into(), &mut self.global_fc1.weight));
        out.push(("global.fc1.bias".into(), &mut self.global_fc1.bias));
        out.push(("global.fc2.weight".into(), &mut self.global_fc2.weight));
        out.push(("global.fc2.bias".into(), &mut self.global_fc2.bias));
        out.push(("fusion.weight".into(), &mut self.fusion.weight));
        out.push(("fusion.bias".into(), &mut self.fusion.bias));
        for (i, c) in self.guidance.iter_mut().enumerate() {
            out.push((format!("guidance.{i}.weight"), &mut c.weight));
            out.push((format!("guidance.{i}.bias"), &mut c.bias));
        }
        out
    }

    /// Serializes all parameters: a JSON header (config plus a tensor
    /// manifest) followed by named little-endian f32 tensors.
    pub fn save_params(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct TensorEntry<'a> {
            name: &'a str,
            len: usize,
        }
        #[derive(Serialize)]
        struct Header<'a> {
            format: &'a str,
            version: u16,
            config: &'a StylizerConfig,
            tensors: Vec<TensorEntry<'a>>,
        }
        let named = self.named_vecs();
        let header = Header {
            format: "dmcl-stylizer",
            version: 1,
            config: &self.config,
            tensors: named
                .iter()
                .map(|(n, v)| TensorEntry { name: n, len: v.len() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, v) in named {
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load_params(bytes: &[u8]) -> Result<StylizerNet> {
        #[derive(Deserialize)]
        struct TensorEntry {
            name: String,
            len: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u16,
            config: StylizerConfig,
            tensors: Vec<TensorEntry>,
        }
        if bytes.len() < 4 {
            return Err(Error::NetFormat("truncated header length".into()));
        }
        let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if bytes.len() < 4 + hlen {
            return Err(Error::NetFormat("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[4..4 + hlen])
            .map_err(|e| Error::NetFormat(format!("bad header json: {e}")))?;
        if header.format != "dmcl-stylizer" || header.version != 1 {
            return Err(Error::NetFormat(format!(
                "unsupported format {}/{}",
                header.format, header.version
            )));
        }
        let mut net = StylizerNet::seeded(header.config, 0)?;
        let mut offset = 4 + hlen;
        let named = net.named_vecs_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::NetFormat(format!(
                "tensor count {} does not match architecture ({})",
                header.tensors.len(),
                named.len()
            )));
        }
        for ((name, vec), entry) in named.into_iter().zip(header.tensors.iter()) {
            if name != entry.name || vec.len() != entry.len {
                return Err(Error::NetFormat(format!(
                    "tensor {} (len {}) does not match expected {} (len {})",
                    entry.name,
                    entry.len,
                    name,
                    vec.len()
                )));
            }
            let nbytes = entry.len * 4;
            if bytes.len() < offset + nbytes {
                return Err(Error::NetFormat(format!("truncated payload at {}", entry.name)));
            }
            for (i, chunk) in bytes[offset..offset + nbytes].chunks_exact(4).enumerate() {
                vec[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
            offset += nbytes;
        }
        if offset != bytes.len() {
            return Err(Error::NetFormat("trailing bytes after payload".into()));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> StylizerConfig {
        StylizerConfig {
            n_styles: 2,
            tap_channels: [2, 3, 4, 5],
            global_fc: 8,
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        Image::from_fn(h, w, |y, x, c| {
            let v = (y * 131 + x * 17 + c * 7 + seed as usize) % 97;
            v as f64 / 96.0
        })
    }

    #[test]
    fn pipeline_shape_contract() {
        let net = StylizerNet::seeded(tiny_config(), 1).unwrap();
        let c_low = test_image(LOW_RES, LOW_RES, 0);
        let c_full = test_image(48, 40, 1);
        let out = net.forward(&c_low, &c_full, 0).unwrap();
        assert_eq!(out.grid.data.len(), GRID_H * GRID_W * GRID_D * 12);
        assert_eq!((out.guidance.height, out.guidance.width), (48, 40));
        assert_eq!((out.output.height, out.output.width), (48, 40));
        out.guidance.validate().unwrap();
    }

    #[test]
    fn grid_depends_only_on_low_res_and_style() {
        let net = StylizerNet::seeded(tiny_config(), 2).unwrap();
        let c_low = test_image(LOW_RES, LOW_RES, 3);
        let small = test_image(32, 32, 4);
        let doubled = small.resize(64, 64);
        let a = net.forward(&c_low, &small, 1).unwrap();
        let b = net.forward(&c_low, &doubled, 1).unwrap();
        assert_eq!(a.grid.data, b.grid.data);
    }

    #[test]
    fn styles_with_different_cin_params_give_different_grids() {
        let net = StylizerNet::seeded(tiny_config(), 5).unwrap();
        let c_low = test_image(LOW_RES, LOW_RES, 6);
        let c_full = test_image(32, 32, 7);
        let a = net.forward(&c_low, &c_full, 0).unwrap();
        let b = net.forward(&c_low, &c_full, 1).unwrap();
        let diff: f64 = a
            .grid
            .data
            .iter()
            .zip(b.grid.data.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "styles should produce different grids");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = StylizerNet::seeded(tiny_config(), 8).unwrap();
        let c_low = test_image(LOW_RES, LOW_RES, 9);
        let c_full = test_image(24, 24, 10);
        let a = net.forward(&c_low, &c_full, 0).unwrap();
        let b = net.forward(&c_low, &c_full, 0).unwrap();
        assert_eq!(a.output.data, b.output.data);
        assert_eq!(a.guidance.data, b.guidance.data);
    }

    #[test]
    fn identity_fusion_reproduces_content() {
        let mut net = StylizerNet::seeded(tiny_config(), 11).unwrap();
        net.set_identity_fusion();
        let c_low = test_image(LOW_RES, LOW_RES, 12);
        let c_full = test_image(20, 28, 13);
        let out = net.forward(&c_low, &c_full, 0).unwrap();
        assert_eq!(out.output.data, c_full.data);
    }

    #[test]
    fn guidance_is_in_unit_interval_and_zero_net_gives_half() {
        let mut net = StylizerNet::seeded(tiny_config(), 14).unwrap();
        let img = test_image(16, 16, 15);
        net.guidance_forward(&img).validate().unwrap();
        for conv in net.guidance.iter_mut() {
            for w in conv.weight.iter_mut() {
                *w = 0.0;
            }
            for b in conv.bias.iter_mut() {
                *b = 0.0;
            }
        }
        let g = net.guidance_forward(&img);
        assert!(g.data.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn params_round_trip_through_blob() {
        let mut net = StylizerNet::seeded(tiny_config(), 16).unwrap();
        // push params off their f64 init so the f32 quantization is visible
        for v in net.fusion.weight.iter_mut() {
            *v = 0.125;
        }
        let blob = net.save_params();
        let back = StylizerNet::load_params(&blob).unwrap();
        assert_eq!(back.config, net.config);
        // exact after one quantization cycle
        assert_eq!(back.save_params(), blob);

        assert!(StylizerNet::load_params(&blob[..10]).is_err());
        let mut bad = blob.clone();
        bad[4] = b'X';
        assert!(StylizerNet::load_params(&bad).is_err());
    }

    #[test]
    fn rejects_wrong_low_res_and_unknown_style() {
        let net = StylizerNet::seeded(tiny_config(), 17).unwrap();
        let small = test_image(32, 32, 18);
        assert!(net.forward(&small, &small, 0).is_err());
        let c_low = test_image(LOW_RES, LOW_RES, 19);
        assert!(net.forward(&c_low, &small, 9).is_err());
    }
}
