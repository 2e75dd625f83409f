use irllrec::objectives::LossWeights;
use irllrec::synthbench::{build_corpus, SynthSpec};
use irllrec::trainer::{fit, TrainConfig};
use irllrec::evalkit::evaluate;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let with_losses: bool = args.get(2).map(|s| s == "full").unwrap_or(false);
    let spec = SynthSpec::default();
    let t0 = std::time::Instant::now();
    let corpus = build_corpus(&spec).unwrap();
    println!("corpus: {} users, {} items, {} train edges ({:?})",
        corpus.graph.num_users(), corpus.graph.num_items(), corpus.graph.num_edges(), t0.elapsed());
    let weights = if with_losses {
        LossWeights { lambda1: 0.02, lambda2: 0.01, lambda3: 0.01, ..LossWeights::default() }
    } else {
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..LossWeights::default() }
    };
    let config = TrainConfig {
        embedding_dim: 32,
        num_prototypes: 8,
        layers: 2,
        batch_size: 512,
        learning_rate: 5e-3,
        max_epochs: epochs,
        patience: epochs,
        seed: 100,
        weights,
        ..TrainConfig::default()
    };
    let t1 = std::time::Instant::now();
    let outcome = fit(&corpus.graph, &corpus.split, &corpus.semantic_user, &corpus.semantic_item, &config).unwrap();
    println!("fit {} epochs in {:?} (diverged={})", outcome.trace.len(), t1.elapsed(), outcome.diverged);
    for row in outcome.trace.iter().take(3).chain(outcome.trace.iter().rev().take(2).rev()) {
        println!("  epoch {}: total {:.4} bpr {:.4} ia {:.4} itm {:.4} val_ndcg {:.4}",
            row.epoch, row.loss_total, row.loss_bpr, row.loss_ia, row.loss_itm, row.val_ndcg20);
    }
    let test = evaluate(&outcome.checkpoint.params, &corpus.graph, &corpus.split.test, config.layers, &[20]);
    println!("test ndcg@20 {:.4} recall@20 {:.4}", test.ndcg_at(20), test.recall_at(20));
}
