use dmcl_core::losses::{ssmc_loss, FeaturePair};
use dmcl_core::mixup::{paired_forward, MixupConfig, MixupMode};
use dmcl_core::nn::{softmax_cross_entropy, Tensor};
use dmcl_core::trainer::{ContrastiveGrads, TinyNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng_for(case: &str, i: usize) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h.wrapping_add(i as u64))
}

fn rand_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor { h, w, c, data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn main() {
    let i = 1usize;
    let mut rng = rng_for("Standard", i);
    let net = TinyNet::seeded(3, 1000 + i as u64);
    let img1 = rand_tensor(16, 16, 3, &mut rng);
    let img2 = rand_tensor(16, 16, 3, &mut rng);
    let label = rng.gen_range(0..3);
    let cfg = MixupConfig { layers: vec![2, 3, 4], alpha: 1.0, mode: MixupMode::Standard };
    let lambda_ssmc = 2.0;
    let delta = 0.05;
    let ssmc_layer = 4;
    let draw_seed = 7000 + i as u64;

    let loss_of = |net: &TinyNet| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(draw_seed);
        let trace = paired_forward(net, &img1, &img2, &cfg, &mut r).unwrap();
        let (task, _, _) = softmax_cross_entropy(&trace.logits, label);
        let pair = FeaturePair::new(trace.main_stage(ssmc_layer), trace.assist_stage(ssmc_layer)).unwrap();
        let (c, _, _) = ssmc_loss(&pair, delta).unwrap();
        task + lambda_ssmc * c
    };

    let mut r = ChaCha8Rng::seed_from_u64(draw_seed);
    let trace = paired_forward(&net, &img1, &img2, &cfg, &mut r).unwrap();
    let (_, d_logits, _) = softmax_cross_entropy(&trace.logits, label);
    let pair = FeaturePair::new(trace.main_stage(ssmc_layer), trace.assist_stage(ssmc_layer)).unwrap();
    let (cval, mut g1, mut g2) = ssmc_loss(&pair, delta).unwrap();
    println!("ssmc value {cval}, lambdas {:?}", trace.lambdas);
    for g in g1.data.iter_mut() { *g *= lambda_ssmc; }
    for g in g2.data.iter_mut() { *g *= lambda_ssmc; }
    let mut grads = net.grads_zero();
    net.backward_paired(&trace, &d_logits,
        Some(&ContrastiveGrads { layer: ssmc_layer, d_main: g1, d_assist: g2, premix: false }),
        &mut grads);

    // param 6 = stage index 3 weight
    let base = net.stages[3].weight.clone();
    let analytic = &grads.stages[3].weight;
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for ci in 0..base.len() {
        let mut n2 = net.clone();
        for (step_i, h) in [1e-5f64, 1e-6, 1e-7].iter().enumerate() {
            n2.stages[3].weight[ci] = base[ci] + h;
            let fp = loss_of(&n2);
            n2.stages[3].weight[ci] = base[ci] - h;
            let fm = loss_of(&n2);
            n2.stages[3].weight[ci] = base[ci];
            let num = (fp - fm) / (2.0 * h);
            let denom = analytic[ci].abs().max(num.abs()).max(1e-8);
            let rel = (analytic[ci] - num).abs() / denom;
            if step_i == 0 && rel > worst.1 {
                worst = (ci, rel, analytic[ci], num);
            }
            if rel > 1e-4 && step_i == 2 {
                println!("coord {ci}: step {h}: analytic {} numeric {num} rel {rel}", analytic[ci]);
            }
        }
    }
    println!("worst at 1e-5: coord {} rel {} analytic {} numeric {}", worst.0, worst.1, worst.2, worst.3);
}
