//! Paired-stream feature interpolation.
//!
//! Two images with the same semantic content but different domains run
//! through the backbone simultaneously. The assist stream is a plain
//! forward pass; the main stream replaces its activation at each configured
//! layer with a convex combination of the two streams, sampling the ratio
//! from a symmetric Beta distribution.

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Tensor};
use crate::trainer::TinyNet;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

/// How the interpolation participates in forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// Gradient flows through both streams at mix points.
    Standard,
    /// The assist contribution is treated as a constant in backward.
    Detach,
    /// The task head consumes the pre-mix main features; mixing still
    /// happens for everything downstream of each mix point.
    OutputBeforeMixup,
    /// One interpolation of the input images; layer list ignored.
    InputLevel,
    /// Plain single-stream forward of the first image.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixupConfig {
    /// 1-indexed backbone stages to mix at.
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mode")]
    pub mode: MixupMode,
}

fn default_layers() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_alpha() -> f64 {
    1.0
}
fn default_mode() -> MixupMode {
    MixupMode::Standard
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            layers: default_layers(),
            alpha: default_alpha(),
            mode: default_mode(),
        }
    }
}

impl MixupConfig {
    pub fn validate(&self, n_stages: usize) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be > 0", self.alpha)));
        }
        match self.mode {
            MixupMode::InputLevel | MixupMode::Off => {}
            _ => {
                if self.layers.is_empty() {
                    return Err(Error::Config("mixup layer list is empty".into()));
                }
            }
        }
        for &k in &self.layers {
            if k == 0 || k > n_stages {
                return Err(Error::Config(format!(
                    "mixup layer {k} outside backbone stages 1..={n_stages}"
                )));
            }
        }
        Ok(())
    }
}

/// One `Beta(alpha, alpha)` draw.
pub fn sample_mixup_ratio(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha {alpha} must be > 0")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta: {e}")))?;
    Ok(beta.sample(rng))
}

/// Elementwise convex combination `lambda * h1 + (1 - lambda) * h2`.
pub fn mix(h1: &Tensor, h2: &Tensor, lambda: f64) -> Result<Tensor> {
    if !h1.same_shape(h2) {
        return Err(Error::shape(h1.shape_str(), h2.shape_str()));
    }
    let mut out = Tensor::zeros(h1.h, h1.w, h1.c);
    for (o, (a, b)) in out.data.iter_mut().zip(h1.data.iter().zip(h2.data.iter())) {
        *o = lambda * a + (1.0 - lambda) * b;
    }
    Ok(out)
}

/// Forward state of a paired pass, sufficient to run the backward pass
/// under every mode.
#[derive(Debug, Clone)]
pub struct PairedTrace {
    pub mode: MixupMode,
    /// Sorted mix layers actually applied this pass.
    pub mix_layers: Vec<usize>,
    /// One ratio per entry of `mix_layers`.
    pub lambdas: Vec<f64>,
    /// Ratio used for input-level mixing, when that mode is active.
    pub input_lambda: Option<f64>,

    pub main_in: Tensor,
    pub assist_in: Tensor,
    /// Main-branch convolution outputs per stage (pre-activation).
    pub main_pre: Vec<Tensor>,
    /// `f_k` applied to the previous main activation (post-activation,
    /// before any mixing).
    pub main_branch: Vec<Tensor>,
    /// Main-stream activations after optional mixing.
    pub main_act: Vec<Tensor>,
    pub assist_pre: Vec<Tensor>,
    pub assist_act: Vec<Tensor>,
    /// Shadow path continuing the pre-mix features of the deepest mix layer
    /// (only under `OutputBeforeMixup`): pre-activations and activations for
    /// stages after that layer.
    pub shadow_pre: Vec<Option<Tensor>>,
    pub shadow_act: Vec<Option<Tensor>>,

    pub head_input: Tensor,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub assist_pooled: Vec<f64>,
    pub assist_logits: Vec<f64>,
}

impl PairedTrace {
    /// Main-stream activation of a 1-indexed stage.
    pub fn main_stage(&self, k: usize) -> &Tensor {
        &self.main_act[k - 1]
    }

    pub fn assist_stage(&self, k: usize) -> &Tensor {
        &self.assist_act[k - 1]
    }
}

/// Runs both streams through the backbone, mixing per the configuration.
/// Ratios are drawn from `rng`, one per mix layer.
pub fn paired_forward(
    net: &TinyNet,
    image1: &Tensor,
    image2: &Tensor,
    cfg: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairedTrace> {
    let n_stages = net.stages.len();
    cfg.validate(n_stages)?;
    if !image1.same_shape(image2) {
        return Err(Error::shape(image1.shape_str(), image2.shape_str()));
    }

    let mut mix_layers: Vec<usize> = Vec::new();
    if matches!(
        cfg.mode,
        MixupMode::Standard | MixupMode::Detach | MixupMode::OutputBeforeMixup
    ) {
        mix_layers = cfg.layers.clone();
        mix_layers.sort_unstable();
        mix_layers.dedup();
    }
    let lambdas: Vec<f64> = mix_layers
        .iter()
        .map(|_| sample_mixup_ratio(cfg.alpha, rng))
        .collect::<Result<_>>()?;

    let (main_in, input_lambda) = match cfg.mode {
        MixupMode::InputLevel => {
            let lambda = sample_mixup_ratio(cfg.alpha, rng)?;
            (mix(image1, image2, lambda)?, Some(lambda))
        }
        _ => (image1.clone(), None),
    };
    let assist_in = image2.clone();

    let mut main_pre = Vec::with_capacity(n_stages);
    let mut main_branch = Vec::with_capacity(n_stages);
    let mut main_act = Vec::with_capacity(n_stages);
    let mut assist_pre = Vec::with_capacity(n_stages);
    let mut assist_act = Vec::with_capacity(n_stages);

    let mut a_cur = assist_in.clone();
    for conv in &net.stages {
        let pre = conv.forward(&a_cur);
        let act = leaky_relu(&pre);
        assist_pre.push(pre);
        assist_act.push(act.clone());
        a_cur = act;
    }

    let mut m_cur = main_in.clone();
    for (si, conv) in net.stages.iter().enumerate() {
        let stage = si + 1;
        let pre = conv.forward(&m_cur);
        let branch = leaky_relu(&pre);
        let act = if let Some(pos) = mix_layers.iter().position(|&k| k == stage) {
            mix(&branch, &assist_act[si], lambdas[pos])?
        } else {
            branch.clone()
        };
        main_pre.push(pre);
        main_branch.push(branch);
        main_act.push(act.clone());
        m_cur = act;
    }

    // shadow continuation for the head under OutputBeforeMixup
    let mut shadow_pre: Vec<Option<Tensor>> = vec![None; n_stages];
    let mut shadow_act: Vec<Option<Tensor>> = vec![None; n_stages];
    let head_input = if cfg.mode == MixupMode::OutputBeforeMixup && !mix_layers.is_empty() {
        let kmax = *mix_layers.last().unwrap();
        let mut cur = main_branch[kmax - 1].clone();
        for si in kmax..n_stages {
            let pre = net.stages[si].forward(&cur);
            let act = leaky_relu(&pre);
            shadow_pre[si] = Some(pre);
            shadow_act[si] = Some(act.clone());
            cur = act;
        }
        cur
    } else {
        main_act[n_stages - 1].clone()
    };

    let (pooled, logits) = net.head_forward(&head_input);
    let (assist_pooled, assist_logits) = net.head_forward(&assist_act[n_stages - 1]);

    Ok(PairedTrace {
        mode: cfg.mode,
        mix_layers,
        lambdas,
        input_lambda,
        main_in,
        assist_in,
        main_pre,
        main_branch,
        main_act,
        assist_pre,
        assist_act,
        shadow_pre,
        shadow_act,
        head_input,
        pooled,
        logits,
        assist_pooled,
        assist_logits,
    })
}
