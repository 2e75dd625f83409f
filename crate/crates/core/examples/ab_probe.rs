use irllrec::objectives::LossWeights;
use irllrec::synthbench::{run_comparison, SynthSpec};
use irllrec::trainer::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let informativeness: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let l1: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let l2w: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let l3: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(40);
    let seeds: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3);
    let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(128);
    let strength: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(6.0);
    let lr: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(5e-3);
    let patience: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(10);

    let spec = SynthSpec { text_informativeness: informativeness, intent_strength: strength, ..SynthSpec::default() };
    let base_cfg = TrainConfig {
        embedding_dim: 32,
        num_prototypes: 8,
        layers: 2,
        batch_size: batch,
        learning_rate: lr,
        max_epochs: epochs,
        patience,
        seed: 100,
        weights: LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..LossWeights::default() },
        ..TrainConfig::default()
    };
    let full_cfg = TrainConfig {
        weights: LossWeights { lambda1: l1, lambda2: l2w, lambda3: l3, ..LossWeights::default() },
        ..base_cfg.clone()
    };
    let t0 = std::time::Instant::now();
    let report = run_comparison(&spec, &base_cfg, &full_cfg, seeds).unwrap();
    for sc in &report.per_seed {
        println!(
            "seed {}: base {:.4} | full {:.4} | diff {:+.4}",
            sc.seed, sc.base.ndcg_at(20), sc.irllrec.ndcg_at(20),
            sc.irllrec.ndcg_at(20) - sc.base.ndcg_at(20)
        );
    }
    println!(
        "inf={} l1={} l2={} l3={} b={} s={} lr={} | mean base {:.4} full {:.4} | w{} l{} t{} | p {:.4} | {:?}",
        informativeness, l1, l2w, l3, batch, strength, lr,
        report.mean_base_ndcg20, report.mean_irllrec_ndcg20, report.wins, report.losses, report.ties,
        report.p_value, t0.elapsed()
    );
}
