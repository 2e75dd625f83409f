//! Synthetic corpora drawn from a latent-intent generative model, with
//! controllable text-embedding informativeness. Provides the end-to-end
//! A/B oracle: with informative text the full framework must beat the plain
//! base model; with pure-noise text the two must be indistinguishable.

use rand::Rng;
use rand_distr::{Dirichlet, StandardNormal};

use crate::corpus::{remap_and_split, DataSplit, IdMaps, InteractionGraph, RawEdge, SemanticMatrix};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricReport};
use crate::mat::{dot, Mat};
use crate::rng::seeded_rng;
use crate::trainer::{fit, TrainConfig};

/// Generator settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    /// Number of latent intent factors K*.
    pub true_intents: usize,
    /// Sharpness of the preference for intent-matched items.
    pub intent_strength: f64,
    pub interactions_per_user: usize,
    /// 0 = pure-noise text embeddings, 1 = fully intent-derived.
    pub text_informativeness: f64,
    pub text_noise_std: f64,
    pub semantic_dim: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 300,
            num_items: 200,
            true_intents: 4,
            intent_strength: 6.0,
            interactions_per_user: 20,
            text_informativeness: 1.0,
            text_noise_std: 0.05,
            semantic_dim: 48,
            dirichlet_alpha: 0.3,
            seed: 7,
        }
    }
}

/// Per-entity intent mixtures; every row is a simplex point.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub user_mixtures: Mat,
    pub item_mixtures: Mat,
}

fn sample_mixtures(rows: usize, k: usize, alpha: f64, rng: &mut impl Rng) -> Mat {
    if k == 1 {
        return Mat::from_fn(rows, 1, |_, _| 1.0);
    }
    let dirichlet = Dirichlet::new_with_size(alpha, k).expect("valid Dirichlet parameters");
    Mat::from_fn(rows, k, {
        let mut pending: Vec<f64> = Vec::new();
        move |_, c| {
            if c == 0 {
                pending = rng.sample(&dirichlet);
            }
            pending[c]
        }
    })
}

/// Draw mixtures and sample `interactions_per_user` distinct items per user
/// with probability proportional to `exp(strength · <user, item>)`.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<(u32, u32)>, GroundTruth)> {
    if spec.interactions_per_user > spec.num_items {
        return Err(Error::Config(format!(
            "interactions_per_user {} exceeds num_items {}",
            spec.interactions_per_user, spec.num_items
        )));
    }
    if spec.true_intents == 0 || spec.num_users == 0 || spec.num_items == 0 {
        return Err(Error::Config("synthetic corpus dimensions must be >= 1".into()));
    }
    let mut rng = seeded_rng(spec.seed, "synth-corpus");
    let user_mixtures = sample_mixtures(spec.num_users, spec.true_intents, spec.dirichlet_alpha, &mut rng);
    let item_mixtures = sample_mixtures(spec.num_items, spec.true_intents, spec.dirichlet_alpha, &mut rng);

    let mut edges = Vec::with_capacity(spec.num_users * spec.interactions_per_user);
    for u in 0..spec.num_users {
        let mut weights: Vec<f64> = (0..spec.num_items)
            .map(|i| (spec.intent_strength * dot(user_mixtures.row(u), item_mixtures.row(i))).exp())
            .collect();
        for _ in 0..spec.interactions_per_user {
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen_range(0.0..total);
            let mut choice = spec.num_items - 1;
            for (i, &w) in weights.iter().enumerate() {
                if draw < w {
                    choice = i;
                    break;
                }
                draw -= w;
            }
            edges.push((u as u32, choice as u32));
            weights[choice] = 0.0; // without replacement
        }
    }
    Ok((edges, GroundTruth { user_mixtures, item_mixtures }))
}

/// Unit-norm text embeddings: `informativeness · (mixture · projection) +
/// noise_std · gaussian`, normalized row-wise. Informativeness 0 yields pure
/// noise.
pub fn synth_semantics(
    ground_truth: &GroundTruth,
    spec: &SynthSpec,
) -> Result<(SemanticMatrix, SemanticMatrix)> {
    let mut proj_rng = seeded_rng(spec.seed, "synth-projection");
    let projection = Mat::from_fn(ground_truth.user_mixtures.cols(), spec.semantic_dim, |_, _| {
        proj_rng.sample::<f64, _>(StandardNormal)
    });
    let mut noise_rng = seeded_rng(spec.seed, "synth-text-noise");
    let mut emit = |mixtures: &Mat| -> Result<SemanticMatrix> {
        let signal = mixtures.matmul(&projection);
        let mut data = Vec::with_capacity(mixtures.rows() * spec.semantic_dim);
        for r in 0..mixtures.rows() {
            let mut row: Vec<f64> = signal
                .row(r)
                .iter()
                .map(|&s| {
                    spec.text_informativeness * s
                        + spec.text_noise_std * noise_rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let norm = dot(&row, &row).sqrt();
            if norm > 1e-12 {
                for v in &mut row {
                    *v /= norm;
                }
            } else {
                row[0] = 1.0;
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        SemanticMatrix::new(mixtures.rows(), spec.semantic_dim, data)
    };
    Ok((emit(&ground_truth.user_mixtures)?, emit(&ground_truth.item_mixtures)?))
}

/// A generated corpus routed through the standard remap/split pipeline, with
/// semantics permuted into the remapped index order.
pub struct SynthCorpus {
    pub graph: InteractionGraph,
    pub split: DataSplit,
    pub id_maps: IdMaps,
    pub semantic_user: SemanticMatrix,
    pub semantic_item: SemanticMatrix,
    pub ground_truth: GroundTruth,
}

/// Raw synthetic edges with the original index baked into the key.
pub fn to_raw_edges(edges: &[(u32, u32)]) -> Vec<RawEdge> {
    edges
        .iter()
        .map(|&(u, i)| RawEdge { user_key: format!("u{u}"), item_key: format!("i{i}") })
        .collect()
}

/// Generate, split (3:1:1), and align semantics with the remapped ids.
pub fn build_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    let (edges, ground_truth) = generate(spec)?;
    let raw = to_raw_edges(&edges);
    let (graph, split, id_maps) = remap_and_split(&raw, (0.6, 0.2, 0.2), spec.seed)?;
    let (sem_u_orig, sem_i_orig) = synth_semantics(&ground_truth, spec)?;
    let semantic_user = permute_rows(&sem_u_orig, &id_maps.users, 'u')?;
    let semantic_item = permute_rows(&sem_i_orig, &id_maps.items, 'i')?;
    Ok(SynthCorpus { graph, split, id_maps, semantic_user, semantic_item, ground_truth })
}

fn permute_rows(
    original: &SemanticMatrix,
    map: &std::collections::BTreeMap<String, u32>,
    prefix: char,
) -> Result<SemanticMatrix> {
    let mut data = vec![0.0f32; map.len() * original.cols];
    for (key, &new_idx) in map {
        let orig: usize = key[1..]
            .parse()
            .map_err(|_| Error::Data(format!("synthetic key {key} lacks a {prefix} index")))?;
        let row = original.row(orig);
        let start = new_idx as usize * original.cols;
        data[start..start + original.cols].copy_from_slice(row);
    }
    SemanticMatrix::new(map.len(), original.cols, data)
}

/// One seed's paired evaluation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub base: MetricReport,
    pub irllrec: MetricReport,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    pub per_seed: Vec<SeedComparison>,
    pub mean_base_ndcg20: f64,
    pub mean_irllrec_ndcg20: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test: P(at least `wins` wins | fair coin).
    pub p_value: f64,
}

/// Train the zero-lambda base variant and the full framework on identical
/// corpora/splits across `num_seeds` seeds; emit per-seed and mean test
/// NDCG@20 plus a one-sided paired sign test.
pub fn run_comparison(
    spec: &SynthSpec,
    config_base: &TrainConfig,
    config_irllrec: &TrainConfig,
    num_seeds: usize,
) -> Result<ComparisonReport> {
    let w = &config_base.weights;
    if w.lambda1 != 0.0 || w.lambda2 != 0.0 || w.lambda3 != 0.0 {
        return Err(Error::Config("base config must have lambda1 = lambda2 = lambda3 = 0".into()));
    }
    let mut neutral_base = config_base.clone();
    let mut neutral_full = config_irllrec.clone();
    neutral_base.weights = LossWeightsNeutral::strip(&neutral_base.weights);
    neutral_full.weights = LossWeightsNeutral::strip(&neutral_full.weights);
    if neutral_base != neutral_full {
        return Err(Error::Config(
            "base and framework configs may differ only in loss weights".into(),
        ));
    }

    let mut per_seed = Vec::new();
    for s in 0..num_seeds as u64 {
        let run_spec = SynthSpec { seed: spec.seed + s, ..spec.clone() };
        let corpus = build_corpus(&run_spec)?;
        let mut report_for = |config: &TrainConfig| -> Result<MetricReport> {
            let run_config = TrainConfig { seed: config.seed + s, ..config.clone() };
            let outcome = fit(
                &corpus.graph,
                &corpus.split,
                &corpus.semantic_user,
                &corpus.semantic_item,
                &run_config,
            )?;
            Ok(evaluate(
                &outcome.checkpoint.params,
                &corpus.graph,
                &corpus.split.test,
                run_config.layers,
                &run_config.eval_ks,
            ))
        };
        let base = report_for(config_base)?;
        let irllrec = report_for(config_irllrec)?;
        per_seed.push(SeedComparison { seed: run_spec.seed, base, irllrec });
    }

    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for sc in &per_seed {
        let diff = sc.irllrec.ndcg_at(20) - sc.base.ndcg_at(20);
        if diff > 0.0 {
            wins += 1;
        } else if diff < 0.0 {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = per_seed.len() as f64;
    Ok(ComparisonReport {
        mean_base_ndcg20: per_seed.iter().map(|s| s.base.ndcg_at(20)).sum::<f64>() / n,
        mean_irllrec_ndcg20: per_seed.iter().map(|s| s.irllrec.ndcg_at(20)).sum::<f64>() / n,
        per_seed,
        wins,
        losses,
        ties,
        p_value: sign_test_p(wins, wins + losses),
    })
}

/// One-sided sign test: probability of `wins` or more successes in `n` fair
/// coin flips (ties already dropped).
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in wins..=n {
        p += binomial(n, j);
    }
    p / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k.min(n - k) {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Zero out the loss-weight block so configs can be compared field-by-field.
struct LossWeightsNeutral;

impl LossWeightsNeutral {
    fn strip(w: &crate::objectives::LossWeights) -> crate::objectives::LossWeights {
        crate::objectives::LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..w.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_rows_are_simplex_points() {
        let spec = SynthSpec { num_users: 40, num_items: 30, ..SynthSpec::default() };
        let (_, gt) = generate(&spec).unwrap();
        for m in [&gt.user_mixtures, &gt.item_mixtures] {
            for r in 0..m.rows() {
                let row = m.row(r);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_intent_is_degenerate_simplex() {
        let spec = SynthSpec { true_intents: 1, num_users: 5, num_items: 8, interactions_per_user: 3, ..SynthSpec::default() };
        let (_, gt) = generate(&spec).unwrap();
        assert!(gt.user_mixtures.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn generation_deterministic_per_seed() {
        let spec = SynthSpec { num_users: 30, num_items: 25, interactions_per_user: 5, ..SynthSpec::default() };
        let (e1, _) = generate(&spec).unwrap();
        let (e2, _) = generate(&spec).unwrap();
        assert_eq!(e1, e2);
        let other = SynthSpec { seed: spec.seed + 1, ..spec };
        let (e3, _) = generate(&other).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn zero_strength_picks_are_uniform() {
        // chi-square against the uniform oracle; df = 19, 3-sigma-ish cutoff
        let spec = SynthSpec {
            num_users: 2000,
            num_items: 20,
            interactions_per_user: 5,
            intent_strength: 0.0,
            ..SynthSpec::default()
        };
        let (edges, _) = generate(&spec).unwrap();
        let mut counts = vec![0usize; 20];
        for &(_, i) in &edges {
            counts[i as usize] += 1;
        }
        let expected = edges.len() as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 43.8, "chi-square {chi2} too large for uniform picks");
    }

    #[test]
    fn per_user_interaction_counts_and_ranges() {
        let spec = SynthSpec { num_users: 12, num_items: 9, interactions_per_user: 4, ..SynthSpec::default() };
        let (edges, _) = generate(&spec).unwrap();
        assert_eq!(edges.len(), 48);
        let mut per_user = vec![std::collections::HashSet::new(); 12];
        for &(u, i) in &edges {
            assert!((i as usize) < 9);
            assert!(per_user[u as usize].insert(i), "duplicate item for user {u}");
        }
        assert!(per_user.iter().all(|s| s.len() == 4));
        assert!(generate(&SynthSpec { interactions_per_user: 10, ..spec }).is_err());
    }

    #[test]
    fn semantics_unit_norm_and_identity_cosine() {
        let spec = SynthSpec {
            num_users: 10,
            num_items: 10,
            text_informativeness: 1.0,
            text_noise_std: 0.0,
            ..SynthSpec::default()
        };
        let gt = GroundTruth {
            user_mixtures: Mat::from_fn(3, 4, |r, c| if c == r % 4 { 1.0 } else { 0.0 }),
            item_mixtures: Mat::from_fn(2, 4, |_, c| if c == 0 { 1.0 } else { 0.0 }),
        };
        let (su, si) = synth_semantics(&gt, &spec).unwrap();
        for r in 0..su.rows {
            let n: f32 = su.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // identical mixtures (item rows both = e0) => cosine 1
        let a = si.row(0);
        let b = si.row(1);
        let cos: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uninformative_semantics_uncorrelated_with_signal() {
        let spec = SynthSpec {
            num_users: 1000,
            num_items: 4,
            text_informativeness: 0.0,
            text_noise_std: 0.05,
            ..SynthSpec::default()
        };
        let mut rng = seeded_rng(3, "test-mix");
        let gt = GroundTruth {
            user_mixtures: sample_mixtures(1000, 4, 0.3, &mut rng),
            item_mixtures: sample_mixtures(4, 4, 0.3, &mut rng),
        };
        let (su, _) = synth_semantics(&gt, &spec).unwrap();
        // cosine against the projected signal each row would have carried
        let mut proj_rng = seeded_rng(spec.seed, "synth-projection");
        let projection = Mat::from_fn(4, spec.semantic_dim, |_, _| proj_rng.sample::<f64, _>(StandardNormal));
        let signal = gt.user_mixtures.matmul(&projection);
        let mut mean_cos = 0.0;
        for r in 0..1000 {
            let srow: Vec<f64> = su.row(r).iter().map(|&v| v as f64).collect();
            mean_cos += crate::mat::cosine(&srow, signal.row(r));
        }
        mean_cos /= 1000.0;
        assert!(mean_cos.abs() < 0.05, "mean correlation {mean_cos}");
    }

    #[test]
    fn build_corpus_aligns_semantics_with_remapped_ids() {
        let spec = SynthSpec { num_users: 25, num_items: 15, interactions_per_user: 6, ..SynthSpec::default() };
        let corpus = build_corpus(&spec).unwrap();
        assert_eq!(corpus.semantic_user.rows, corpus.graph.num_users());
        assert_eq!(corpus.semantic_item.rows, corpus.graph.num_items());
        let (sem_u_orig, _) = synth_semantics(&corpus.ground_truth, &spec).unwrap();
        for (key, &idx) in &corpus.id_maps.users {
            let orig: usize = key[1..].parse().unwrap();
            assert_eq!(corpus.semantic_user.row(idx as usize), sem_u_orig.row(orig));
        }
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(5, 5) - 1.0 / 32.0).abs() < 1e-12);
        assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-12);
        assert!((sign_test_p(0, 5) - 1.0).abs() < 1e-12);
        assert!((sign_test_p(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn run_comparison_rejects_mismatched_configs() {
        let spec = SynthSpec { num_users: 10, num_items: 8, interactions_per_user: 3, ..SynthSpec::default() };
        let base = TrainConfig::default();
        // base must have zero lambdas
        assert!(run_comparison(&spec, &base, &base, 1).is_err());
        let mut zeroed = base.clone();
        zeroed.weights.lambda1 = 0.0;
        zeroed.weights.lambda2 = 0.0;
        zeroed.weights.lambda3 = 0.0;
        let mut other_dim = base.clone();
        other_dim.embedding_dim = 8;
        assert!(run_comparison(&spec, &zeroed, &other_dim, 1).is_err());
    }
}
