use dmcl_core::trainer::experiment::{run_dg_experiment, ExperimentConfig};
use dmcl_core::trainer::OptimizerKind;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let alpha: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let layers: Vec<usize> = args
        .get(5)
        .map(|s| s.chars().filter_map(|c| c.to_digit(10).map(|d| d as usize)).collect())
        .unwrap_or_else(|| vec![2, 3, 4]);
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = steps;
    cfg.train.optimizer = OptimizerKind::Adam;
    cfg.train.lr = lr;
    cfg.train.mixup.alpha = alpha;
    cfg.train.mixup.layers = layers;
    cfg.seeds = (0..n_seeds).collect();
    let t0 = Instant::now();
    let report = run_dg_experiment(&cfg).unwrap();
    println!("ran in {:.1} s (steps {steps}, seeds {n_seeds}, lr {lr})", t0.elapsed().as_secs_f64());
    for s in &report.summaries {
        let accs: Vec<f64> = report.cells.iter().filter(|c| c.name == s.name).map(|c| c.held_out_accuracy).collect();
        println!("{}: {:.4} +- {:.4} {:?}", s.name, s.mean_accuracy, s.std_accuracy, accs);
    }
    for name in ["deepall", "dmcl"] {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.name == name).collect();
        let mut per_layer = vec![0.0f64; 4];
        for c in &cells {
            for (l, v) in c.std_of_means_per_layer.iter().enumerate() {
                per_layer[l] += v.unwrap_or(0.0) / cells.len() as f64;
            }
        }
        println!("{name} std-of-means: {per_layer:?}");
    }
    let dm = report.cells.iter().find(|c| c.name == "dmcl").unwrap();
    println!("dmcl ssmc peak {:.4} final {:.4}", dm.contrastive_peak, dm.contrastive_final);
}
