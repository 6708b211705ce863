use dmcl_core::trainer::experiment::{run_dg_experiment, ExperimentConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let n_seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = steps;
    cfg.seeds = (0..n_seeds as u64).collect();
    let t0 = Instant::now();
    let report = run_dg_experiment(&cfg).unwrap();
    println!("ran in {:.1} s", t0.elapsed().as_secs_f64());
    for s in &report.summaries {
        println!("{}: {:.4} +- {:.4} (n={})", s.name, s.mean_accuracy, s.std_accuracy, s.n_seeds);
    }
    // per-seed accuracy detail
    for c in &report.cells {
        println!("  {} seed {} acc {:.4} init_task {:.3} final_task {:.3} ssmc_peak {:.4} ssmc_final {:.4}",
            c.name, c.seed, c.held_out_accuracy, c.initial_task_loss, c.final_task_loss,
            c.contrastive_peak, c.contrastive_final);
    }
    // stats flattening: deepall vs dmcl mean std-of-means per layer
    for name in ["deepall", "dmcl"] {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.name == name).collect();
        let mut per_layer = vec![0.0f64; 4];
        for c in &cells {
            for (l, v) in c.std_of_means_per_layer.iter().enumerate() {
                per_layer[l] += v.unwrap_or(0.0) / cells.len() as f64;
            }
        }
        println!("{name} std-of-means per layer: {per_layer:?}");
    }
}
