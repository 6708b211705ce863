// Probe the domain gap: train DeepAll, evaluate per-domain.
use dmcl_core::trainer::experiment::CorpusConfig;
use dmcl_core::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let corpus = CorpusConfig::default().generate().unwrap();
    let sources = [0usize, 1, 2];
    for seed in [0u64, 1] {
        let mut cfg = TrainConfig::defaults_for(Variant::Deepall);
        cfg.optimizer = OptimizerKind::Adam;
        cfg.lr = 0.003;
        cfg.steps = steps;
        cfg.seed = seed;
        let out = train(&corpus, &sources, &cfg).unwrap();
        let mut line = format!("seed {seed}:");
        for d in 0..4 {
            let acc = evaluate(&out.net, corpus.domain_samples(d)).unwrap();
            line += &format!(" d{d} {acc:.3}");
        }
        println!("{line}");
    }
}
