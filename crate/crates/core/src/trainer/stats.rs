//! Cross-domain activation statistics: a domain-invariant backbone should
//! produce features whose per-layer mean and variance barely move when the
//! input domain changes.

use super::TinyNet;
use crate::error::{Error, Result};
use crate::image_model::Image;
use crate::nn::Tensor;
use serde::Serialize;

/// Minimum probe images per domain for a meaningful estimate.
pub const MIN_PROBE_IMAGES: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct LayerDomainStat {
    pub domain: usize,
    /// Probe-set average of the per-image activation mean.
    pub mean: f64,
    /// Probe-set average of the per-image activation variance.
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    /// 1-indexed backbone stage.
    pub layer: usize,
    pub per_domain: Vec<LayerDomainStat>,
    /// Std across domains of the per-domain means; absent with one domain.
    pub std_of_means: Option<f64>,
    pub std_of_variances: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureStats {
    pub layers: Vec<LayerStats>,
}

/// Whole-tensor mean and population variance in one pass.
fn tensor_stats(t: &Tensor) -> (f64, f64) {
    let n = t.data.len() as f64;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for v in &t.data {
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n;
    (mean, (sumsq / n - mean * mean).max(0.0))
}

fn population_std(values: &[f64]) -> f64 {
    // identical inputs must report exactly zero spread
    if values.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Computes per-layer, per-domain activation statistics over the probe
/// sets, and their cross-domain standard deviations.
pub fn feature_statistics(
    net: &TinyNet,
    probes: &[(usize, Vec<&Image>)],
) -> Result<FeatureStats> {
    if probes.is_empty() {
        return Err(Error::Config("no probe domains given".into()));
    }
    for (domain, images) in probes {
        if images.len() < MIN_PROBE_IMAGES {
            return Err(Error::Config(format!(
                "domain {domain} has {} probe images, need at least {MIN_PROBE_IMAGES}",
                images.len()
            )));
        }
    }
    let n_layers = net.stages.len();
    let mut per_layer_domain: Vec<Vec<LayerDomainStat>> = vec![Vec::new(); n_layers];
    for (domain, images) in probes {
        let mut sums = vec![(0.0f64, 0.0f64); n_layers];
        for img in images {
            let trace = net.forward_single(&Tensor::from_image(img))?;
            for (l, act) in trace.act.iter().enumerate() {
                let (m, v) = tensor_stats(act);
                sums[l].0 += m;
                sums[l].1 += v;
            }
        }
        let count = images.len() as f64;
        for (l, (sm, sv)) in sums.into_iter().enumerate() {
            per_layer_domain[l].push(LayerDomainStat {
                domain: *domain,
                mean: sm / count,
                variance: sv / count,
            });
        }
    }
    let layers = per_layer_domain
        .into_iter()
        .enumerate()
        .map(|(l, per_domain)| {
            let (std_of_means, std_of_variances) = if per_domain.len() >= 2 {
                let means: Vec<f64> = per_domain.iter().map(|d| d.mean).collect();
                let vars: Vec<f64> = per_domain.iter().map(|d| d.variance).collect();
                (Some(population_std(&means)), Some(population_std(&vars)))
            } else {
                (None, None)
            };
            LayerStats {
                layer: l + 1,
                per_domain,
                std_of_means,
                std_of_variances,
            }
        })
        .collect();
    Ok(FeatureStats { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_model::Image;

    fn probe_images(seed: usize) -> Vec<Image> {
        (0..MIN_PROBE_IMAGES)
            .map(|i| {
                Image::from_fn(16, 16, |y, x, c| {
                    ((y * 7 + x * 3 + c + i * 13 + seed) % 50) as f64 / 50.0
                })
            })
            .collect()
    }

    #[test]
    fn identical_probe_sets_give_zero_cross_domain_std() {
        let net = TinyNet::seeded(4, 5);
        let imgs = probe_images(0);
        let refs: Vec<&Image> = imgs.iter().collect();
        let probes = vec![(0, refs.clone()), (1, refs.clone()), (2, refs)];
        let stats = feature_statistics(&net, &probes).unwrap();
        for layer in &stats.layers {
            assert_eq!(layer.std_of_means.unwrap(), 0.0);
            assert_eq!(layer.std_of_variances.unwrap(), 0.0);
        }
    }

    #[test]
    fn single_domain_reports_absent_std() {
        let net = TinyNet::seeded(4, 6);
        let imgs = probe_images(1);
        let refs: Vec<&Image> = imgs.iter().collect();
        let stats = feature_statistics(&net, &[(0, refs)]).unwrap();
        for layer in &stats.layers {
            assert!(layer.std_of_means.is_none());
            assert!(layer.std_of_variances.is_none());
        }
    }

    #[test]
    fn too_few_probes_rejected() {
        let net = TinyNet::seeded(4, 7);
        let imgs = probe_images(2);
        let refs: Vec<&Image> = imgs.iter().take(3).collect();
        assert!(feature_statistics(&net, &[(0, refs)]).is_err());
    }

    #[test]
    fn one_pass_stats_match_two_pass_oracle() {
        let imgs = probe_images(3);
        let t = Tensor::from_image(&imgs[0]);
        let (mean, var) = tensor_stats(&t);
        // independent two-pass recomputation
        let n = t.data.len() as f64;
        let m2: f64 = t.data.iter().sum::<f64>() / n;
        let v2: f64 = t.data.iter().map(|v| (v - m2) * (v - m2)).sum::<f64>() / n;
        assert!((mean - m2).abs() < 1e-10);
        assert!((var - v2).abs() < 1e-10);
    }
}
