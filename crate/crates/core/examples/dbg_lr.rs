use dmcl_core::trainer::*;
use dmcl_core::trainer::experiment::CorpusConfig;
use std::time::Instant;

fn main() {
    let corpus = CorpusConfig::default().generate().unwrap();
    let sources = [0usize, 1, 2];
    let held: Vec<_> = corpus.domain_samples(3);
    let train_set: Vec<_> = corpus
        .samples
        .iter()
        .filter(|s| sources.contains(&s.domain))
        .collect();
    for (opt, lr) in [
        (OptimizerKind::Sgd, 0.01),
        (OptimizerKind::Sgd, 0.05),
        (OptimizerKind::Sgd, 0.15),
        (OptimizerKind::Adam, 0.001),
        (OptimizerKind::Adam, 0.003),
    ] {
        let mut cfg = TrainConfig::defaults_for(Variant::Deepall);
        cfg.optimizer = opt;
        cfg.lr = lr;
        cfg.steps = 600;
        cfg.seed = 0;
        let t0 = Instant::now();
        let out = train(&corpus, &sources, &cfg).unwrap();
        let train_acc = evaluate(&out.net, train_set.iter().copied()).unwrap();
        let held_acc = evaluate(&out.net, held.iter().copied()).unwrap();
        let first = out.curve.iter().take(10).map(|p| p.task).sum::<f64>() / 10.0;
        let last = out.curve.iter().rev().take(10).map(|p| p.task).sum::<f64>() / 10.0;
        println!(
            "{opt:?} lr {lr}: loss {first:.3} -> {last:.3}, train acc {train_acc:.3}, held-out {held_acc:.3} ({:.0} s)",
            t0.elapsed().as_secs_f64()
        );
    }
}
