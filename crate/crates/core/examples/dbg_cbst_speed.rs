use dmcl_core::stylizer::net::StylizerConfig;
use dmcl_core::stylizer::train::{train_cbst, CbstTrainConfig};
use std::time::Instant;

fn main() {
    for (name, taps, fc) in [
        ("default", [8usize, 16, 32, 64], 256usize),
        ("half", [4, 8, 16, 32], 128),
    ] {
        let cfg = CbstTrainConfig {
            n_content: 2,
            n_styles: 2,
            steps: 10,
            lr: 0.003,
            seed: 1,
            net: StylizerConfig {
                n_styles: 2,
                tap_channels: taps,
                global_fc: fc,
            },
            ..Default::default()
        };
        let t0 = Instant::now();
        let out = train_cbst(&cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "{name}: {:.3} s/step (10 steps in {:.1} s), first total {:.4}, last {:.4}",
            dt / 10.0,
            dt,
            out.curve.first().unwrap().total,
            out.curve.last().unwrap().total
        );
    }
}
