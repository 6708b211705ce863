use dmcl_core::losses::LossWeights;
use dmcl_core::stylizer::net::StylizerConfig;
use dmcl_core::stylizer::train::{train_cbst, CbstTrainConfig};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    for seed in [1u64, 2, 3] {
        let mut results = Vec::new();
        for lambda_mask in [1.0, 0.0] {
            let cfg = CbstTrainConfig {
                n_content: 4,
                n_styles: 2,
                steps,
                lr: 0.003,
                seed,
                weights: LossWeights {
                    lambda_mask,
                    ..Default::default()
                },
                net: StylizerConfig {
                    n_styles: 2,
                    tap_channels: [4, 8, 16, 32],
                    global_fc: 128,
                },
                ..Default::default()
            };
            let t0 = Instant::now();
            let out = train_cbst(&cfg).unwrap();
            let change = out.mean_inbox_change().unwrap();
            let last = out.curve.last().unwrap();
            println!(
                "seed {seed} lambda_mask {lambda_mask}: inbox change {change:.5} | total {:.3} content {:.3} style {:.3} reg {:.4} mask {:.4} | {:.1}s",
                last.total, last.content, last.style, last.regularizer, last.mask,
                t0.elapsed().as_secs_f64()
            );
            results.push(change);
        }
        println!(
            "seed {seed}: mask-on {} mask-off {} -> {}",
            results[0],
            results[1],
            if results[0] < results[1] { "LOWER (ok)" } else { "HIGHER (bad)" }
        );
    }
}
