//! Overfit-scale training loop for the stylizer: a handful of generated
//! latents, a few target styles derived from water-type renderings, and the
//! weighted four-component objective.

use super::net::{StylizerConfig, StylizerGrads, StylizerNet, LOW_RES};
use super::BilateralGrid;
use crate::error::Result;
use crate::image_model::corpus::{default_domain_specs, render_latent};
use crate::image_model::{realize_domain, synthesize_underwater, Image};
use crate::losses::{
    build_mask, cbst_total_loss, content_loss, laplacian_reg, mask_loss, style_loss, BoxList,
    LossWeights, Mask, StyleStats,
};
use crate::nn::{Adam, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbstTrainConfig {
    #[serde(default = "d_content")]
    pub n_content: usize,
    #[serde(default = "d_styles")]
    pub n_styles: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub net: StylizerConfig,
    /// Stop once the smoothed total drops below this fraction of the
    /// initial total (None trains the full step budget).
    #[serde(default)]
    pub early_stop_fraction: Option<f64>,
}

fn d_content() -> usize {
    8
}
fn d_styles() -> usize {
    2
}
fn d_steps() -> usize {
    2000
}
fn d_lr() -> f64 {
    0.003
}

impl Default for CbstTrainConfig {
    fn default() -> Self {
        CbstTrainConfig {
            n_content: d_content(),
            n_styles: d_styles(),
            steps: d_steps(),
            lr: d_lr(),
            seed: 0,
            weights: LossWeights::default(),
            net: StylizerConfig::default(),
            early_stop_fraction: None,
        }
    }
}

/// One content item: the latent image, its shape box, and the cached
/// extractor features used by the content objective.
pub struct ContentItem {
    pub image: Image,
    pub boxes: BoxList,
    pub mask: Mask,
    content_tap: Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct CbstCurvePoint {
    pub step: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub regularizer: f64,
    pub mask: f64,
}

pub struct CbstOutcome {
    pub net: StylizerNet,
    pub curve: Vec<CbstCurvePoint>,
    pub contents: Vec<ContentItem>,
    pub style_stats: Vec<StyleStats>,
}

impl CbstOutcome {
    pub fn initial_total(&self) -> f64 {
        let n = self.curve.len().min(10).max(1);
        self.curve.iter().take(n).map(|p| p.total).sum::<f64>() / n as f64
    }

    pub fn final_total(&self) -> f64 {
        let n = self.curve.len().min(10).max(1);
        self.curve.iter().rev().take(n).map(|p| p.total).sum::<f64>() / n as f64
    }

    /// Mean absolute in-box change between content and stylized output,
    /// averaged over contents and styles.
    pub fn mean_inbox_change(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for item in &self.contents {
            for style in 0..self.net.config.n_styles {
                let out = self.net.forward(&item.image, &item.image, style)?;
                for &(bx, by, bw, bh) in &item.boxes.0 {
                    for y in by..by + bh {
                        for x in bx..bx + bw {
                            for ch in 0..3 {
                                total += (out.output.get(y, x, ch) - item.image.get(y, x, ch)).abs();
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Generates the toy content set (latents with shape boxes) and per-style
/// target statistics from strongly stylized water-type renderings.
pub fn prepare_inputs(
    cfg: &CbstTrainConfig,
    net: &StylizerNet,
) -> Result<(Vec<ContentItem>, Vec<StyleStats>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC0FFEE));
    let mut contents = Vec::with_capacity(cfg.n_content);
    for i in 0..cfg.n_content {
        let latent = render_latent(i % 4, LOW_RES, &mut rng)?;
        let boxes = BoxList(vec![latent.bbox]);
        let mask = build_mask(&boxes, LOW_RES, LOW_RES)?;
        let taps = net.extractor_taps(&latent.image);
        contents.push(ContentItem {
            content_tap: taps[3].clone(),
            image: latent.image,
            boxes,
            mask,
        });
    }
    // style targets: one latent pushed through a distinct strong water type
    let specs = default_domain_specs(cfg.n_styles + 1, cfg.seed.wrapping_add(99));
    let mut styles = Vec::with_capacity(cfg.n_styles);
    for s in 0..cfg.n_styles {
        let latent = render_latent((s + 1) % 4, LOW_RES, &mut rng)?;
        let spec = &specs[s + 1];
        let (t, b) = realize_domain(spec, LOW_RES, LOW_RES)?;
        let styled = synthesize_underwater(&latent.image, &t, b)?;
        let taps = net.extractor_taps(&styled);
        styles.push(StyleStats::from_taps(&taps));
    }
    Ok((contents, styles))
}

/// The four loss components of one stylizer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CbstComponents {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub regularizer: f64,
    pub mask: f64,
}

/// Evaluates the weighted stylizer objective on one content/style pair and,
/// when `grads` is given, backpropagates it into the trainable parameters.
#[allow(clippy::too_many_arguments)]
pub fn cbst_objective(
    net: &StylizerNet,
    content: &Image,
    content_tap: &Tensor,
    mask: &Mask,
    stats: &StyleStats,
    style: usize,
    weights: &LossWeights,
    grads: Option<&mut StylizerGrads>,
) -> Result<CbstComponents> {
    let trace = net.forward_traced(content, content, style)?;
    let output = &trace.output;

    let (l_mask, d_mask) = mask_loss(output, content, mask)?;
    let (out_taps, out_pre) = net.extractor_taps_traced(&Tensor::from_image(output));
    let (l_content, d_content_tap) = content_loss(&out_taps[3], content_tap)?;
    let (l_style, d_style_taps) = style_loss(&out_taps, stats)?;
    let (l_reg, d_reg) = laplacian_reg(&trace.grid);
    let total = cbst_total_loss(l_content, l_style, l_reg, l_mask, weights);

    if let Some(grads) = grads {
        // combine tap gradients: style on every tap, content on the deepest
        let mut d_taps: [Option<Tensor>; 4] = [None, None, None, None];
        for (i, g) in d_style_taps.into_iter().enumerate() {
            let mut g = g.map(|v| v * weights.lambda_sa);
            if i == 3 {
                for (a, b) in g.data.iter_mut().zip(d_content_tap.data.iter()) {
                    *a += weights.lambda_c * b;
                }
            }
            d_taps[i] = Some(g);
        }
        let out_t = Tensor::from_image(output);
        let d_out_features = net.extractor_backward_input(&out_t, &out_pre, &out_taps, &d_taps);
        let mut d_output = Image {
            height: output.height,
            width: output.width,
            data: d_out_features.data,
        };
        for (a, b) in d_output.data.iter_mut().zip(d_mask.data.iter()) {
            *a += weights.lambda_mask * b;
        }
        let d_grid_extra = BilateralGrid {
            data: d_reg.data.iter().map(|v| v * weights.lambda_r).collect(),
        };
        net.backward(&trace, &d_output, Some(&d_grid_extra), grads);
    }

    Ok(CbstComponents {
        total,
        content: l_content,
        style: l_style,
        regularizer: l_reg,
        mask: l_mask,
    })
}

/// Trains the stylizer with Adam on the weighted total objective.
pub fn train_cbst(cfg: &CbstTrainConfig) -> Result<CbstOutcome> {
    cfg.weights.validate()?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.n_styles = cfg.n_styles;
    let mut net = StylizerNet::seeded(net_cfg, cfg.seed)?;
    let (contents, style_stats) = prepare_inputs(cfg, &net)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7EA));
    let mut opt = Adam::new(cfg.lr);
    let mut curve: Vec<CbstCurvePoint> = Vec::with_capacity(cfg.steps);
    let mut initial: Option<f64> = None;

    for step in 0..cfg.steps {
        let item = &contents[rng.gen_range(0..contents.len())];
        let style = rng.gen_range(0..cfg.n_styles);

        let mut grads = StylizerGrads::zeros(&net);
        let parts = cbst_objective(
            &net,
            &item.image,
            &item.content_tap,
            &item.mask,
            &style_stats[style],
            style,
            &cfg.weights,
            Some(&mut grads),
        )?;
        opt.step(net.trainable_mut(), grads.vecs());

        curve.push(CbstCurvePoint {
            step,
            total: parts.total,
            content: parts.content,
            style: parts.style,
            regularizer: parts.regularizer,
            mask: parts.mask,
        });

        if initial.is_none() && curve.len() >= 10 {
            initial = Some(curve.iter().take(10).map(|p| p.total).sum::<f64>() / 10.0);
        }
        if let (Some(frac), Some(init)) = (cfg.early_stop_fraction, initial) {
            if curve.len() >= 20 {
                let tail = curve.iter().rev().take(10).map(|p| p.total).sum::<f64>() / 10.0;
                if tail <= frac * init {
                    break;
                }
            }
        }
    }

    Ok(CbstOutcome {
        net,
        curve,
        contents,
        style_stats,
    })
}
