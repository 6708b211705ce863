// Sweep held-out domain harshness with custom specs replacing preset 3.
use dmcl_core::image_model::corpus::*;
use dmcl_core::image_model::*;
use dmcl_core::trainer::*;
use rand::SeedableRng;

fn build_corpus(d3: &DomainSpec) -> Corpus {
    // mirror generate_toy_corpus but with a custom spec for domain 3
    let mut specs = default_domain_specs(4, 7);
    specs[3] = d3.clone();
    let mut samples = Vec::new();
    for class in 0..4 {
        for rep in 0..25 {
            let group = class * 25 + rep;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                (7u64 ^ (group as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                    .wrapping_mul(0xBF58_476D_1CE4_E5B9),
            );
            let latent = render_latent(class, 32, &mut rng).unwrap();
            for (domain, spec) in specs.iter().enumerate() {
                let (t, b) = realize_domain(spec, 32, 32).unwrap();
                let observed = synthesize_underwater(&latent.image, &t, b).unwrap();
                samples.push(LabeledSample { image: observed, label: class, domain, pair_group: group });
            }
        }
    }
    Corpus::new(samples)
}

fn main() {
    let candidates = [
        ("mild-teal(cur)", DomainSpec { base_transmission: [0.62, 0.84, 0.78], ramp_amplitude: 0.20, background: BackgroundLight([0.12, 0.44, 0.50]), seed: 1003 }),
        ("murky", DomainSpec { base_transmission: [0.40, 0.60, 0.72], ramp_amplitude: 0.25, background: BackgroundLight([0.10, 0.45, 0.55]), seed: 1003 }),
        ("very-murky", DomainSpec { base_transmission: [0.28, 0.45, 0.60], ramp_amplitude: 0.22, background: BackgroundLight([0.12, 0.50, 0.58]), seed: 1003 }),
        ("dead-red", DomainSpec { base_transmission: [0.15, 0.60, 0.80], ramp_amplitude: 0.10, background: BackgroundLight([0.35, 0.45, 0.50]), seed: 1003 }),
        ("bright-haze", DomainSpec { base_transmission: [0.35, 0.40, 0.45], ramp_amplitude: 0.30, background: BackgroundLight([0.65, 0.75, 0.80]), seed: 1003 }),
    ];
    for (name, spec) in candidates {
        let corpus = build_corpus(&spec);
        let sources = [0usize, 1, 2];
        let mut accs = Vec::new();
        let mut src_accs = Vec::new();
        for seed in [0u64, 1] {
            let mut cfg = TrainConfig::defaults_for(Variant::Deepall);
            cfg.optimizer = OptimizerKind::Adam;
            cfg.lr = 0.003;
            cfg.steps = 600;
            cfg.seed = seed;
            let out = train(&corpus, &sources, &cfg).unwrap();
            accs.push(evaluate(&out.net, corpus.domain_samples(3)).unwrap());
            src_accs.push(evaluate(&out.net, corpus.domain_samples(0)).unwrap());
        }
        println!("{name}: held-out {:?} src-d0 {:?}", accs, src_accs);
    }
}
