//! Leave-one-domain-out experiment harness: trains every configured variant
//! on the source domains, evaluates on the held-out domain, and gathers the
//! cross-domain feature statistics.

use super::stats::{feature_statistics, FeatureStats};
use super::{train, evaluate, Corpus, CurvePoint, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::image_model::corpus::generate_toy_corpus;
use crate::image_model::Image;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    #[serde(default = "d_domains")]
    pub n_domains: usize,
    #[serde(default = "d_per_class")]
    pub n_per_domain_per_class: usize,
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_corpus_seed")]
    pub seed: u64,
}

fn d_domains() -> usize {
    4
}
fn d_per_class() -> usize {
    25
}
fn d_classes() -> usize {
    4
}
fn d_image_size() -> usize {
    32
}
fn d_corpus_seed() -> u64 {
    7
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_domains: d_domains(),
            n_per_domain_per_class: d_per_class(),
            n_classes: d_classes(),
            image_size: d_image_size(),
            seed: d_corpus_seed(),
        }
    }
}

impl CorpusConfig {
    pub fn generate(&self) -> Result<Corpus> {
        let samples = generate_toy_corpus(
            self.n_domains,
            self.n_per_domain_per_class,
            self.n_classes,
            self.image_size,
            self.seed,
        )?;
        Ok(Corpus::new(samples))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Defaults to the last domain.
    #[serde(default)]
    pub held_out_domain: Option<usize>,
    /// Optional cap on the number of source domains (fewer-source runs).
    #[serde(default)]
    pub sources: Option<usize>,
    #[serde(default = "d_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Base training configuration; `variant` and `seed` are overridden per
    /// cell.
    #[serde(default = "d_base_train")]
    pub train: TrainConfig,
    /// Extra cells sweeping the contrastive coefficient.
    #[serde(default)]
    pub lambda_ssmc_grid: Option<Vec<f64>>,
    /// Extra cells sweeping the mixup stage set.
    #[serde(default)]
    pub mixup_stage_grid: Option<Vec<Vec<usize>>>,
    #[serde(default = "d_probe")]
    pub probe_images: usize,
}

fn d_variants() -> Vec<Variant> {
    vec![Variant::Deepall, Variant::CbstOnly, Variant::CbstDmx, Variant::Dmcl]
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_base_train() -> TrainConfig {
    TrainConfig::defaults_for(Variant::Dmcl)
}
fn d_probe() -> usize {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            held_out_domain: None,
            sources: None,
            variants: d_variants(),
            seeds: d_seeds(),
            train: d_base_train(),
            lambda_ssmc_grid: None,
            mixup_stage_grid: None,
            probe_images: d_probe(),
        }
    }
}

/// One experiment cell: a named training configuration.
#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub config: TrainConfig,
}

impl ExperimentConfig {
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for v in &self.variants {
            let mut cfg = self.train.clone();
            cfg.variant = *v;
            cells.push(Cell {
                name: v.to_string(),
                config: cfg,
            });
        }
        if let Some(grid) = &self.lambda_ssmc_grid {
            for lambda in grid {
                let mut cfg = self.train.clone();
                cfg.variant = Variant::Dmcl;
                cfg.weights.lambda_ssmc = *lambda;
                cells.push(Cell {
                    name: format!("dmcl_lambda_{lambda}"),
                    config: cfg,
                });
            }
        }
        if let Some(grid) = &self.mixup_stage_grid {
            for stages in grid {
                let mut cfg = self.train.clone();
                cfg.variant = Variant::CbstDmx;
                cfg.mixup.layers = stages.clone();
                let tag = stages
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join("");
                cells.push(Cell {
                    name: format!("cbst_dmx_stages_{tag}"),
                    config: cfg,
                });
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub held_out_accuracy: f64,
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    pub contrastive_peak: f64,
    pub contrastive_final: f64,
    /// Cross-domain std of per-layer activation means (layers 1..=4).
    pub std_of_means_per_layer: Vec<Option<f64>>,
    pub std_of_variances_per_layer: Vec<Option<f64>>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub name: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub held_out_domain: usize,
    pub source_domains: Vec<usize>,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<CellSummary>,
}

fn smoothed(points: &[CurvePoint], take: usize, pick: impl Fn(&CurvePoint) -> f64) -> f64 {
    let n = points.len().min(take).max(1);
    points.iter().take(n).map(&pick).sum::<f64>() / n as f64
}

fn smoothed_tail(points: &[CurvePoint], take: usize, pick: impl Fn(&CurvePoint) -> f64) -> f64 {
    let n = points.len().min(take).max(1);
    points.iter().rev().take(n).map(&pick).sum::<f64>() / n as f64
}

impl ExperimentReport {
    pub fn summary_for(&self, name: &str) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Human-readable summary table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,held_out_accuracy,final_task_loss\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.4},{:.6}\n",
                c.name, c.seed, c.held_out_accuracy, c.final_task_loss
            ));
        }
        out.push_str("\ncell,mean_accuracy,std_accuracy,n_seeds\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{:.4},{:.4},{}\n",
                s.name, s.mean_accuracy, s.std_accuracy, s.n_seeds
            ));
        }
        out
    }
}

/// Evenly spaced probe images from each domain of the corpus.
fn probe_sets(corpus: &Corpus, probe_n: usize) -> Vec<(usize, Vec<&Image>)> {
    corpus
        .domains
        .iter()
        .map(|&d| {
            let samples = corpus.domain_samples(d);
            let picks: Vec<&Image> = (0..probe_n.min(samples.len()))
                .map(|i| &samples[i * samples.len() / probe_n.min(samples.len())].image)
                .collect();
            (d, picks)
        })
        .collect()
}

/// Trains and evaluates every (cell, seed) pair of the grid.
pub fn run_dg_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let corpus = cfg.corpus.generate()?;
    let held_out = cfg
        .held_out_domain
        .unwrap_or_else(|| *corpus.domains.last().unwrap());
    if !corpus.domains.contains(&held_out) {
        return Err(Error::Config(format!("held-out domain {held_out} not in corpus")));
    }
    let mut sources: Vec<usize> = corpus
        .domains
        .iter()
        .copied()
        .filter(|d| *d != held_out)
        .collect();
    if let Some(cap) = cfg.sources {
        if cap == 0 || cap > sources.len() {
            return Err(Error::Config(format!(
                "source cap {cap} outside 1..={}",
                sources.len()
            )));
        }
        sources.truncate(cap);
    }
    let held_out_samples = corpus.domain_samples(held_out);
    let probes = probe_sets(&corpus, cfg.probe_images);

    let mut cells_out = Vec::new();
    for cell in cfg.cells() {
        for &seed in &cfg.seeds {
            let mut train_cfg = cell.config.clone();
            train_cfg.seed = seed;
            let outcome = train(&corpus, &sources, &train_cfg)?;
            let accuracy = evaluate(&outcome.net, held_out_samples.iter().copied())?;
            let stats: FeatureStats = feature_statistics(&outcome.net, &probes)?;
            cells_out.push(CellResult {
                name: cell.name.clone(),
                variant: train_cfg.variant,
                seed,
                held_out_accuracy: accuracy,
                initial_task_loss: smoothed(&outcome.curve, 10, |p| p.task),
                final_task_loss: smoothed_tail(&outcome.curve, 10, |p| p.task),
                contrastive_peak: outcome
                    .curve
                    .iter()
                    .map(|p| p.contrastive)
                    .fold(0.0, f64::max),
                contrastive_final: smoothed_tail(&outcome.curve, 10, |p| p.contrastive),
                std_of_means_per_layer: stats.layers.iter().map(|l| l.std_of_means).collect(),
                std_of_variances_per_layer: stats
                    .layers
                    .iter()
                    .map(|l| l.std_of_variances)
                    .collect(),
                curve: outcome.curve,
            });
        }
    }

    let mut summaries = Vec::new();
    let mut seen = Vec::new();
    for c in &cells_out {
        if seen.contains(&c.name) {
            continue;
        }
        seen.push(c.name.clone());
        let accs: Vec<f64> = cells_out
            .iter()
            .filter(|x| x.name == c.name)
            .map(|x| x.held_out_accuracy)
            .collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        summaries.push(CellSummary {
            name: c.name.clone(),
            mean_accuracy: mean,
            std_accuracy: std,
            n_seeds: accs.len(),
        });
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        held_out_domain: held_out,
        source_domains: sources,
        cells: cells_out,
        summaries,
    })
}
