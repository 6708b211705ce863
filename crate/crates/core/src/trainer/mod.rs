//! Four-stage convolutional classifier with hand-derived gradients, plus the
//! training loop for the domain-generalization variants.

pub mod experiment;
pub mod stats;

use crate::error::{Error, Result};
use crate::image_model::corpus::LabeledSample;
use crate::image_model::Image;
use crate::losses::{sc_loss, ssc_loss, ssmc_loss, FeaturePair, LossWeights};
use crate::mixup::{paired_forward, MixupConfig, MixupMode, PairedTrace};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward,
    softmax_cross_entropy, Adam, Conv2d, Conv2dGrads, Linear, LinearGrads, Sgd, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Stage widths of the backbone; stage outputs are addressable 1..=4.
pub const STAGE_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Smallest input edge the stride-2 stack accepts.
pub const MIN_INPUT_SIZE: usize = 16;

/// Backbone: four stride-2 3x3 convolution stages with a leaky
/// rectifier, global average pooling, and a linear classifier head.
#[derive(Debug, Clone)]
pub struct TinyNet {
    pub stages: Vec<Conv2d>,
    pub head: Linear,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct TinyNetGrads {
    pub stages: Vec<Conv2dGrads>,
    pub head: LinearGrads,
}

impl TinyNetGrads {
    pub fn vecs(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.stages {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }
}

/// Activations of one plain forward pass.
#[derive(Debug, Clone)]
pub struct SingleTrace {
    pub input: Tensor,
    pub pre: Vec<Tensor>,
    pub act: Vec<Tensor>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Stage feature maps plus head logits, addressable by 1-indexed stage.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    pub stages: Vec<Tensor>,
    pub logits: Vec<f64>,
}

impl ActivationSet {
    pub fn stage(&self, k: usize) -> &Tensor {
        &self.stages[k - 1]
    }
}

/// Gradient of a contrastive term with respect to the paired features at
/// one stage. `premix` means the main-side feature was taken before mixing.
#[derive(Debug, Clone)]
pub struct ContrastiveGrads {
    pub layer: usize,
    pub d_main: Tensor,
    pub d_assist: Tensor,
    pub premix: bool,
}

impl TinyNet {
    pub fn seeded(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(4);
        let mut in_c = 3;
        for w in STAGE_WIDTHS {
            stages.push(Conv2d::seeded(in_c, w, 3, 2, &mut rng));
            in_c = w;
        }
        let head = Linear::seeded(STAGE_WIDTHS[3], n_classes, &mut rng);
        TinyNet {
            stages,
            head,
            n_classes,
        }
    }

    pub fn grads_zero(&self) -> TinyNetGrads {
        TinyNetGrads {
            stages: self.stages.iter().map(Conv2d::grads_zero).collect(),
            head: self.head.grads_zero(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for c in self.stages.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn head_forward(&self, features: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let pooled = global_avg_pool(features);
        let logits = self.head.forward(&pooled);
        (pooled, logits)
    }

    pub fn forward_single(&self, img: &Tensor) -> Result<SingleTrace> {
        if img.h < MIN_INPUT_SIZE || img.w < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "input {} below minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}",
                img.shape_str()
            )));
        }
        let mut pre = Vec::with_capacity(4);
        let mut act = Vec::with_capacity(4);
        let mut cur = img.clone();
        for conv in &self.stages {
            let z = conv.forward(&cur);
            let a = leaky_relu(&z);
            pre.push(z);
            act.push(a.clone());
            cur = a;
        }
        let (pooled, logits) = self.head_forward(&cur);
        Ok(SingleTrace {
            input: img.clone(),
            pre,
            act,
            pooled,
            logits,
        })
    }

    /// Backward of a plain forward pass; parameter gradients accumulate.
    pub fn backward_single(&self, trace: &SingleTrace, d_logits: &[f64], grads: &mut TinyNetGrads) {
        let d_pooled = self.head.backward(&trace.pooled, d_logits, &mut grads.head);
        let last = trace.act.last().unwrap();
        let mut d_act = global_avg_pool_backward(last.h, last.w, &d_pooled);
        for si in (0..self.stages.len()).rev() {
            let d_pre = leaky_relu_backward(&trace.pre[si], &d_act);
            let input = if si == 0 { &trace.input } else { &trace.act[si - 1] };
            let dx = self.stages[si].backward(input, &d_pre, &mut grads.stages[si], si > 0);
            if let Some(dx) = dx {
                d_act = dx;
            }
        }
    }

    /// Backward of a paired pass, honoring the mix mode: `Standard` routes
    /// gradient through both streams at mix points, `Detach` treats the
    /// assist contribution as constant. Contrastive gradients (when given)
    /// always reach both streams.
    pub fn backward_paired(
        &self,
        trace: &PairedTrace,
        d_logits: &[f64],
        contrastive: Option<&ContrastiveGrads>,
        grads: &mut TinyNetGrads,
    ) {
        let n = self.stages.len();
        let zero_like =
            |t: &Tensor| Tensor::zeros(t.h, t.w, t.c);
        let mut d_main: Vec<Tensor> = trace.main_act.iter().map(&zero_like).collect();
        let mut d_assist: Vec<Tensor> = trace.assist_act.iter().map(&zero_like).collect();
        // extra gradient entering the pre-mix main branch at a stage
        let mut d_branch_extra: Vec<Option<Tensor>> = vec![None; n];

        let d_pooled = self.head.backward(&trace.pooled, d_logits, &mut grads.head);
        let d_head_input =
            global_avg_pool_backward(trace.head_input.h, trace.head_input.w, &d_pooled);

        let shadow_head = trace.mode == MixupMode::OutputBeforeMixup && !trace.mix_layers.is_empty();
        if shadow_head {
            // walk the shadow continuation back down to the deepest mix layer
            let kmax = *trace.mix_layers.last().unwrap();
            let mut d_cur = d_head_input;
            for si in (kmax..n).rev() {
                let pre = trace.shadow_pre[si].as_ref().unwrap();
                let d_pre = leaky_relu_backward(pre, &d_cur);
                let input: &Tensor = if si == kmax {
                    &trace.main_branch[kmax - 1]
                } else {
                    trace.shadow_act[si - 1].as_ref().unwrap()
                };
                d_cur = self.stages[si]
                    .backward(input, &d_pre, &mut grads.stages[si], true)
                    .unwrap();
            }
            d_branch_extra[kmax - 1] = Some(d_cur);
        } else {
            d_main[n - 1] = d_main[n - 1].add(&d_head_input);
        }

        let mut assist_active = trace.mode == MixupMode::Standard && !trace.mix_layers.is_empty();
        if let Some(c) = contrastive {
            let si = c.layer - 1;
            if c.premix {
                let extra = d_branch_extra[si].take();
                d_branch_extra[si] = Some(match extra {
                    Some(t) => t.add(&c.d_main),
                    None => c.d_main.clone(),
                });
            } else {
                d_main[si] = d_main[si].add(&c.d_main);
            }
            d_assist[si] = d_assist[si].add(&c.d_assist);
            assist_active = true;
        }
        // OutputBeforeMixup keeps the standard two-stream backward at mix points
        if trace.mode == MixupMode::OutputBeforeMixup && !trace.mix_layers.is_empty() {
            assist_active = true;
        }

        for si in (0..n).rev() {
            let stage = si + 1;
            // main stream
            let mut d_branch = if let Some(pos) = trace.mix_layers.iter().position(|&k| k == stage)
            {
                let lambda = trace.lambdas[pos];
                let mut db = Tensor::zeros(d_main[si].h, d_main[si].w, d_main[si].c);
                for (o, g) in db.data.iter_mut().zip(d_main[si].data.iter()) {
                    *o = lambda * g;
                }
                if trace.mode != MixupMode::Detach {
                    for (a, g) in d_assist[si].data.iter_mut().zip(d_main[si].data.iter()) {
                        *a += (1.0 - lambda) * g;
                    }
                }
                db
            } else {
                d_main[si].clone()
            };
            if let Some(extra) = &d_branch_extra[si] {
                d_branch = d_branch.add(extra);
            }
            let d_pre = leaky_relu_backward(&trace.main_pre[si], &d_branch);
            let input = if si == 0 {
                &trace.main_in
            } else {
                &trace.main_act[si - 1]
            };
            let dx = self.stages[si].backward(input, &d_pre, &mut grads.stages[si], si > 0);
            if let Some(dx) = dx {
                d_main[si - 1] = d_main[si - 1].add(&dx);
            }

            // assist stream
            if assist_active {
                let d_pre_a = leaky_relu_backward(&trace.assist_pre[si], &d_assist[si]);
                let input_a = if si == 0 {
                    &trace.assist_in
                } else {
                    &trace.assist_act[si - 1]
                };
                let dxa = self.stages[si].backward(input_a, &d_pre_a, &mut grads.stages[si], si > 0);
                if let Some(dxa) = dxa {
                    d_assist[si - 1] = d_assist[si - 1].add(&dxa);
                }
            }
        }
    }
}

/// Plain forward pass exposing the per-stage activations.
pub fn tinynet_forward(net: &TinyNet, image: &Image) -> Result<ActivationSet> {
    let trace = net.forward_single(&Tensor::from_image(image))?;
    Ok(ActivationSet {
        stages: trace.act,
        logits: trace.logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Deepall,
    CbstOnly,
    CbstDmx,
    Dmcl,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Deepall => "deepall",
            Variant::CbstOnly => "cbst_only",
            Variant::CbstDmx => "cbst_dmx",
            Variant::Dmcl => "dmcl",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    Sc,
    Ssc,
    Ssmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to 5% of `lr` over the step budget.
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default = "d_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_ssmc_layer")]
    pub ssmc_layer: usize,
    #[serde(default = "d_contrastive")]
    pub contrastive: ContrastiveKind,
    /// Regularize the pre-mix main features instead of the mixed ones.
    #[serde(default)]
    pub ssmc_premix: bool,
    #[serde(default = "d_true")]
    pub hflip: bool,
}

fn d_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    8
}
fn d_steps() -> usize {
    600
}
fn d_schedule() -> LrSchedule {
    LrSchedule::Cosine
}
fn d_ssmc_layer() -> usize {
    4
}
fn d_contrastive() -> ContrastiveKind {
    ContrastiveKind::Ssmc
}
fn d_true() -> bool {
    true
}

impl TrainConfig {
    pub fn defaults_for(variant: Variant) -> Self {
        TrainConfig {
            variant,
            optimizer: d_optimizer(),
            lr: d_lr(),
            momentum: d_momentum(),
            batch_size: d_batch(),
            steps: d_steps(),
            seed: 0,
            weights: LossWeights::default(),
            mixup: MixupConfig::default(),
            lr_schedule: d_schedule(),
            ssmc_layer: d_ssmc_layer(),
            contrastive: d_contrastive(),
            ssmc_premix: false,
            hflip: d_true(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(1..=4).contains(&self.ssmc_layer) {
            return Err(Error::Config(format!(
                "ssmc_layer {} outside 1..=4",
                self.ssmc_layer
            )));
        }
        self.weights.validate()?;
        self.mixup.validate(4)?;
        Ok(())
    }
}

/// Corpus wrapper with a pair-group index for cross-domain lookups.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<LabeledSample>,
    pub n_classes: usize,
    pub domains: Vec<usize>,
    index: HashMap<(usize, usize), usize>,
}

impl Corpus {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        let mut index = HashMap::new();
        let mut domains = Vec::new();
        let mut n_classes = 0;
        for (i, s) in samples.iter().enumerate() {
            index.insert((s.pair_group, s.domain), i);
            if !domains.contains(&s.domain) {
                domains.push(s.domain);
            }
            n_classes = n_classes.max(s.label + 1);
        }
        domains.sort_unstable();
        Corpus {
            samples,
            n_classes,
            domains,
            index,
        }
    }

    /// Cross-domain variant of a sample (same pair group, another domain).
    pub fn paired(&self, sample: &LabeledSample, domain: usize) -> Option<&LabeledSample> {
        self.index
            .get(&(sample.pair_group, domain))
            .map(|i| &self.samples[*i])
    }

    /// The "captured" subset: every pair group contributes exactly one
    /// sample, in a deterministic native source domain. The remaining grid
    /// variants stand in for resynthesized augmentations, so plain pooled
    /// training must not see them.
    pub fn native_indices(&self, source_domains: &[usize]) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                source_domains.contains(&s.domain)
                    && source_domains[s.pair_group % source_domains.len()] == s.domain
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn domain_samples(&self, domain: usize) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.domain == domain).collect()
    }
}

/// One recorded training step.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub task: f64,
    pub contrastive: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: TinyNet,
    pub curve: Vec<CurvePoint>,
}

fn image_tensor(img: &Image, flip: bool) -> Tensor {
    if flip {
        Tensor::from_image(&img.hflip())
    } else {
        Tensor::from_image(img)
    }
}

enum StepOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl StepOptimizer {
    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        match self {
            StepOptimizer::Sgd(o) => o.step(params, grads),
            StepOptimizer::Adam(o) => o.step(params, grads),
        }
    }
}

/// Trains one variant on the given source domains. Deterministic for a
/// fixed configuration.
///
/// Every variant draws from the native subset (one domain per pair group);
/// the augmentation-based variants additionally reach the cross-domain
/// resyntheses through the pair index.
pub fn train(corpus: &Corpus, source_domains: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source_idx: Vec<usize> = corpus.native_indices(source_domains);
    if source_idx.is_empty() {
        return Err(Error::Config("no samples in the requested source domains".into()));
    }
    let paired_variant = matches!(cfg.variant, Variant::CbstDmx | Variant::Dmcl);
    if paired_variant && source_domains.len() < 2 {
        return Err(Error::Config(
            "paired variants need at least 2 source domains".into(),
        ));
    }

    let mut net = TinyNet::seeded(corpus.n_classes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => StepOptimizer::Sgd(Sgd::new(cfg.lr, cfg.momentum)),
        OptimizerKind::Adam => StepOptimizer::Adam(Adam::new(cfg.lr)),
    };
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps as f64;
        let lr_now = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::Cosine => {
                let floor = 0.05 * cfg.lr;
                floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        };
        match &mut opt {
            StepOptimizer::Sgd(o) => o.lr = lr_now,
            StepOptimizer::Adam(o) => o.lr = lr_now,
        }
        let mut grads = net.grads_zero();
        let mut task_sum = 0.0;
        let mut contrast_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let s1 = &corpus.samples[source_idx[rng.gen_range(0..source_idx.len())]];
            let flip = cfg.hflip && rng.gen_bool(0.5);
            match cfg.variant {
                Variant::Deepall | Variant::CbstOnly => {
                    // image-level augmentation: sometimes swap in the
                    // cross-domain resynthesis of the same latent
                    let img = if cfg.variant == Variant::CbstOnly
                        && source_domains.len() > 1
                        && rng.gen_bool(0.5)
                    {
                        let others: Vec<usize> = source_domains
                            .iter()
                            .copied()
                            .filter(|d| *d != s1.domain)
                            .collect();
                        let d2 = others[rng.gen_range(0..others.len())];
                        &corpus
                            .paired(s1, d2)
                            .ok_or_else(|| Error::Config("missing pair".into()))?
                            .image
                    } else {
                        &s1.image
                    };
                    let trace = net.forward_single(&image_tensor(img, flip))?;
                    let (loss, mut d_logits, _) = softmax_cross_entropy(&trace.logits, s1.label);
                    for g in d_logits.iter_mut() {
                        *g *= inv_batch;
                    }
                    net.backward_single(&trace, &d_logits, &mut grads);
                    task_sum += loss;
                }
                Variant::CbstDmx | Variant::Dmcl => {
                    // the resynthesis augmentation applies to the main input
                    // as well: half the time it swaps domain, like cbst_only
                    let s1 = if source_domains.len() > 1 && rng.gen_bool(0.5) {
                        let d1 = source_domains[rng.gen_range(0..source_domains.len())];
                        corpus
                            .paired(s1, d1)
                            .ok_or_else(|| Error::Config("missing pair".into()))?
                    } else {
                        s1
                    };
                    let others: Vec<usize> = source_domains
                        .iter()
                        .copied()
                        .filter(|d| *d != s1.domain)
                        .collect();
                    let d2 = others[rng.gen_range(0..others.len())];
                    let s2 = corpus
                        .paired(s1, d2)
                        .ok_or_else(|| Error::Config("missing cross-domain pair".into()))?;
                    let t1 = image_tensor(&s1.image, flip);
                    let t2 = image_tensor(&s2.image, flip);
                    let trace = paired_forward(&net, &t1, &t2, &cfg.mixup, &mut rng)?;
                    let (loss, mut d_logits, _) = softmax_cross_entropy(&trace.logits, s1.label);
                    for g in d_logits.iter_mut() {
                        *g *= inv_batch;
                    }
                    task_sum += loss;

                    let lambda_c = cfg.weights.lambda_ssmc;
                    let contrastive = if cfg.variant == Variant::Dmcl && lambda_c > 0.0 {
                        let k = cfg.ssmc_layer;
                        let premix = cfg.ssmc_premix && trace.mix_layers.contains(&k);
                        let f_main = if premix {
                            &trace.main_branch[k - 1]
                        } else {
                            trace.main_stage(k)
                        };
                        let pair = FeaturePair::new(f_main, trace.assist_stage(k))?;
                        let (value, mut g1, mut g2) = match cfg.contrastive {
                            ContrastiveKind::Sc => {
                                let (v, a, b) = sc_loss(&pair);
                                (v, a, b)
                            }
                            ContrastiveKind::Ssc => ssc_loss(&pair)?,
                            ContrastiveKind::Ssmc => ssmc_loss(&pair, cfg.weights.delta)?,
                        };
                        contrast_sum += value;
                        let scale = lambda_c * inv_batch;
                        for g in g1.data.iter_mut() {
                            *g *= scale;
                        }
                        for g in g2.data.iter_mut() {
                            *g *= scale;
                        }
                        Some(ContrastiveGrads {
                            layer: k,
                            d_main: g1,
                            d_assist: g2,
                            premix,
                        })
                    } else {
                        None
                    };
                    net.backward_paired(&trace, &d_logits, contrastive.as_ref(), &mut grads);
                }
            }
        }
        opt.step(net.trainable_mut(), grads.vecs());
        let task = task_sum * inv_batch;
        let contrastive = contrast_sum * inv_batch;
        curve.push(CurvePoint {
            step,
            total: task + cfg.weights.lambda_ssmc * contrastive,
            task,
            contrastive,
        });
    }
    Ok(TrainOutcome { net, curve })
}

/// Top-1 accuracy over a sample set.
pub fn evaluate<'a>(net: &TinyNet, samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in samples {
        let trace = net.forward_single(&Tensor::from_image(&s.image))?;
        let pred = trace
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == s.label {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}
