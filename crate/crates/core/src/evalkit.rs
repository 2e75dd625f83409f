//! Full-ranking top-K evaluation (Recall@K, NDCG@K), sparsity-group
//! reporting, and embedding export.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::corpus::{InteractionGraph, SemanticMatrix};
use crate::encoders::{
    forward, graph_propagate, DegreeMode, ForwardOptions, ParameterSet,
};
use crate::error::{Error, Result};
use crate::mat::{dot, Mat};

/// Per-cutoff ranking metrics averaged over evaluated users.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_evaluated_users: usize,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }
}

/// Users grouped by train-interaction count with roughly equal total
/// interactions per group.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SparsityReport {
    /// Max train degree inside each group.
    pub boundaries: Vec<usize>,
    pub user_counts: Vec<usize>,
    /// Summed train interactions per group.
    pub masses: Vec<usize>,
    pub ndcg20: Vec<f64>,
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,max_train_degree,users,train_interactions,ndcg@20\n");
        for g in 0..self.user_counts.len() {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                g, self.boundaries[g], self.user_counts[g], self.masses[g], self.ndcg20[g]
            ));
        }
        out
    }
}

/// Score every item for `user` from the layer-mean embeddings, mask the
/// user's train items to -inf, and return the `k_max` best item indices.
/// Ties break toward the smaller item index.
pub fn rank_items(
    params: &ParameterSet,
    graph: &InteractionGraph,
    user: usize,
    k_max: usize,
    layers: usize,
) -> Vec<u32> {
    let (_, _, base_user, base_item) = graph_propagate(params, graph, layers);
    rank_items_from_base(&base_user, &base_item, graph, user, k_max)
}

/// Ranking core over precomputed base embeddings.
pub fn rank_items_from_base(
    base_user: &Mat,
    base_item: &Mat,
    graph: &InteractionGraph,
    user: usize,
    k_max: usize,
) -> Vec<u32> {
    let uvec = base_user.row(user);
    let mut scored: Vec<(f64, u32)> = (0..graph.num_items())
        .map(|i| (dot(uvec, base_item.row(i)), i as u32))
        .collect();
    for &(i, _) in graph.user_neighbors(user) {
        scored[i as usize].0 = f64::NEG_INFINITY;
    }
    let k = k_max.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    // larger score first, smaller index first on ties
    let better = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, better);
        scored.truncate(k);
    }
    scored.sort_by(better);
    // train items carry -inf and must never be returned
    scored.into_iter().take_while(|&(s, _)| s > f64::NEG_INFINITY).map(|(_, i)| i).collect()
}

/// `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with 1-based `1/log2(p+1)` discounts. The ideal DCG uses
/// all `|relevant|` positions (not capped at k), which keeps NDCG@K
/// non-decreasing in K.
pub fn ndcg_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(idx, _)| 1.0 / ((idx + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len()).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Average per-user metrics over users with at least one edge in
/// `split_edges`. Deterministic regardless of worker count: per-user results
/// are collected in user order before accumulation.
pub fn evaluate(
    params: &ParameterSet,
    graph: &InteractionGraph,
    split_edges: &[(u32, u32)],
    layers: usize,
    ks: &[usize],
) -> MetricReport {
    let (_, _, base_user, base_item) = graph_propagate(params, graph, layers);
    evaluate_from_base(&base_user, &base_item, graph, split_edges, ks)
}

/// Evaluation core over precomputed base embeddings.
pub fn evaluate_from_base(
    base_user: &Mat,
    base_item: &Mat,
    graph: &InteractionGraph,
    split_edges: &[(u32, u32)],
    ks: &[usize],
) -> MetricReport {
    let mut relevant: BTreeMap<u32, HashSet<u32>> = BTreeMap::new();
    for &(u, i) in split_edges {
        relevant.entry(u).or_default().insert(i);
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let users: Vec<(&u32, &HashSet<u32>)> = relevant.iter().collect();

    let per_user: Vec<(Vec<f64>, Vec<f64>)> = users
        .par_iter()
        .map(|(&u, rel)| {
            let ranked = rank_items_from_base(base_user, base_item, graph, u as usize, k_max);
            let recalls = ks.iter().map(|&k| recall_at_k(&ranked, rel, k)).collect();
            let ndcgs = ks.iter().map(|&k| ndcg_at_k(&ranked, rel, k)).collect();
            (recalls, ndcgs)
        })
        .collect();

    let n = per_user.len();
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (kidx, &k) in ks.iter().enumerate() {
        let r: f64 = per_user.iter().map(|(rs, _)| rs[kidx]).sum();
        let d: f64 = per_user.iter().map(|(_, ds)| ds[kidx]).sum();
        recall.insert(k, if n > 0 { r / n as f64 } else { 0.0 });
        ndcg.insert(k, if n > 0 { d / n as f64 } else { 0.0 });
    }
    MetricReport { recall, ndcg, num_evaluated_users: n }
}

/// Sort test users by train-interaction count and cut them into groups of
/// approximately equal summed train interactions; report per-group sizes and
/// NDCG@20.
pub fn sparsity_report(
    params: &ParameterSet,
    graph: &InteractionGraph,
    split_edges: &[(u32, u32)],
    layers: usize,
    num_groups: usize,
) -> Result<SparsityReport> {
    if num_groups < 2 {
        return Err(Error::Config("sparsity report needs at least 2 groups".into()));
    }
    let mut relevant: BTreeMap<u32, HashSet<u32>> = BTreeMap::new();
    for &(u, i) in split_edges {
        relevant.entry(u).or_default().insert(i);
    }
    if relevant.len() < num_groups {
        return Err(Error::Data(format!(
            "only {} test users for {num_groups} sparsity groups",
            relevant.len()
        )));
    }

    let mut users: Vec<u32> = relevant.keys().copied().collect();
    users.sort_by_key(|&u| (graph.user_degree(u as usize), u));
    let total_mass: usize = users.iter().map(|&u| graph.user_degree(u as usize)).sum();

    let mut assignment: Vec<Vec<u32>> = vec![Vec::new(); num_groups];
    let mut cum = 0usize;
    for &u in &users {
        let w = graph.user_degree(u as usize);
        let mid = cum as f64 + w as f64 / 2.0;
        let g = ((mid * num_groups as f64 / total_mass as f64) as usize).min(num_groups - 1);
        assignment[g].push(u);
        cum += w;
    }
    if assignment.iter().any(|g| g.is_empty()) {
        return Err(Error::Data("a sparsity group came out empty; fewer distinct degrees than groups".into()));
    }

    let (_, _, base_user, base_item) = graph_propagate(params, graph, layers);
    let mut boundaries = Vec::new();
    let mut user_counts = Vec::new();
    let mut masses = Vec::new();
    let mut ndcg20 = Vec::new();
    for group in &assignment {
        boundaries.push(group.iter().map(|&u| graph.user_degree(u as usize)).max().unwrap());
        user_counts.push(group.len());
        masses.push(group.iter().map(|&u| graph.user_degree(u as usize)).sum());
        let edges: Vec<(u32, u32)> = group
            .iter()
            .flat_map(|&u| relevant[&u].iter().map(move |&i| (u, i)))
            .collect();
        let report = evaluate_from_base(&base_user, &base_item, graph, &edges, &[20]);
        ndcg20.push(report.ndcg_at(20));
    }
    Ok(SparsityReport { boundaries, user_counts, masses, ndcg20 })
}

/// Write the base, refined-intent, and text-intent matrices as three `EMB1`
/// files (`<prefix>.base.emb`, `.intent.emb`, `.text.emb`). Rows stack users
/// first (M rows), then items (N rows).
pub fn export_embeddings(
    params: &ParameterSet,
    graph: &InteractionGraph,
    semantic_user: &Mat,
    semantic_item: &Mat,
    layers: usize,
    degree_mode: DegreeMode,
    prefix: &Path,
) -> Result<[PathBuf; 3]> {
    let acts = forward(
        params,
        graph,
        semantic_user,
        semantic_item,
        &ForwardOptions::full(layers, degree_mode),
    )?;
    let stacked = |u: &Mat, i: &Mat| -> SemanticMatrix {
        let all = Mat::vstack(&[u, i]);
        SemanticMatrix {
            rows: all.rows(),
            cols: all.cols(),
            data: all.data().iter().map(|&v| v as f32).collect(),
        }
    };
    let outputs = [
        (stacked(&acts.base_user, &acts.base_item), suffixed(prefix, "base.emb")),
        (stacked(&acts.refined_user_mean, &acts.refined_item_mean), suffixed(prefix, "intent.emb")),
        (stacked(&acts.text_user, &acts.text_item), suffixed(prefix, "text.emb")),
    ];
    let mut paths = Vec::new();
    for (m, path) in outputs {
        crate::corpus::write_semantic_matrix(&m, &path)?;
        paths.push(path);
    }
    Ok([paths[0].clone(), paths[1].clone(), paths[2].clone()])
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if !name.is_empty() {
        name.push('.');
    }
    name.push_str(suffix);
    prefix.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn rel(items: &[u32]) -> HashSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn rank_masks_train_items() {
        let g = InteractionGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        let base_u = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        // item 0 scores higher but is a train item
        let base_i = Mat::from_vec(2, 2, vec![5.0, 0.0, 1.0, 0.0]);
        let ranked = rank_items_from_base(&base_u, &base_i, &g, 0, 2);
        assert_eq!(ranked, vec![1]);
    }

    #[test]
    fn rank_ties_break_by_index() {
        let g = InteractionGraph::from_edges(1, 4, &[(0, 3)]).unwrap();
        let base_u = Mat::from_vec(1, 1, vec![1.0]);
        let base_i = Mat::from_vec(4, 1, vec![0.5, 0.5, 0.5, 9.0]);
        let ranked = rank_items_from_base(&base_u, &base_i, &g, 0, 3);
        assert_eq!(ranked, vec![0, 1, 2]);
    }

    #[test]
    fn rank_matches_full_sort_oracle() {
        let n_items = 500;
        let mut rng = stream_rng(7, Stream::Synth);
        let g = InteractionGraph::from_edges(1, n_items, &[(0, 42), (0, 99)]).unwrap();
        let base_u = Mat::from_vec(1, 8, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let base_i = Mat::from_fn(n_items, 8, |_, _| rng.gen_range(-1.0..1.0));
        let ranked = rank_items_from_base(&base_u, &base_i, &g, 0, 10);

        // oracle: score everything, full stable sort
        let mut all: Vec<(f64, u32)> = (0..n_items)
            .filter(|&i| i != 42 && i != 99)
            .map(|i| (dot(base_u.row(0), base_i.row(i)), i as u32))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<u32> = all.into_iter().take(10).map(|(_, i)| i).collect();
        assert_eq!(ranked, expect);
    }

    #[test]
    fn recall_values() {
        let relevant = rel(&[1, 2]);
        assert!((recall_at_k(&[1, 5, 9], &relevant, 3) - 0.5).abs() < 1e-15);
        assert!((recall_at_k(&[1, 2, 9], &relevant, 3) - 1.0).abs() < 1e-15);
        // random instance vs set-intersection oracle
        let mut rng = stream_rng(9, Stream::Synth);
        for _ in 0..50 {
            let mut pool: Vec<u32> = (0..40).collect();
            for i in (1..pool.len()).rev() {
                pool.swap(i, rng.gen_range(0..=i));
            }
            let ranked: Vec<u32> = pool[..20].to_vec();
            let relevant: HashSet<u32> = (0..5).map(|_| rng.gen_range(0..40)).collect();
            let k = rng.gen_range(1..20);
            let hits = ranked[..k].iter().collect::<HashSet<_>>()
                .intersection(&relevant.iter().collect())
                .count();
            let expect = hits as f64 / relevant.len() as f64;
            assert!((recall_at_k(&ranked, &relevant, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_single_hit_positions() {
        let relevant = rel(&[7]);
        assert!((ndcg_at_k(&[7, 1, 2], &relevant, 3) - 1.0).abs() < 1e-12);
        let expect = 1.0 / 3.0f64.log2();
        assert!((ndcg_at_k(&[1, 7, 2], &relevant, 3) - expect).abs() < 1e-9);
        assert!((expect - 0.6309297535714574).abs() < 1e-12);
    }

    #[test]
    fn ndcg_moving_hit_up_never_decreases() {
        let relevant = rel(&[3]);
        let mut prev = -1.0;
        for pos in (0..6).rev() {
            let mut ranked: Vec<u32> = (10..16).collect();
            ranked[pos] = 3;
            let v = ndcg_at_k(&ranked, &relevant, 6);
            assert!(v >= prev);
            prev = v;
        }
    }

    fn random_instance(
        seed: u64,
        num_users: usize,
        num_items: usize,
    ) -> (InteractionGraph, Mat, Mat, Vec<(u32, u32)>) {
        let mut rng = stream_rng(seed, Stream::Synth);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..num_users as u32 {
            for _ in 0..rng.gen_range(1..4) {
                train.push((u, rng.gen_range(0..num_items as u32)));
            }
            for _ in 0..rng.gen_range(0..3) {
                let i = rng.gen_range(0..num_items as u32);
                if !train.contains(&(u, i)) {
                    test.push((u, i));
                }
            }
        }
        test.sort_unstable();
        test.dedup();
        let g = InteractionGraph::from_edges(num_users, num_items, &train).unwrap();
        let base_u = Mat::from_fn(num_users, 4, |_, _| rng.gen_range(-1.0..1.0));
        let base_i = Mat::from_fn(num_items, 4, |_, _| rng.gen_range(-1.0..1.0));
        (g, base_u, base_i, test)
    }

    /// Brute-force reference evaluator: full sort, direct set math, literal
    /// DCG/IDCG sums.
    fn evaluate_oracle(
        base_u: &Mat,
        base_i: &Mat,
        g: &InteractionGraph,
        test: &[(u32, u32)],
        ks: &[usize],
    ) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>, usize) {
        let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(u, i) in test {
            by_user.entry(u).or_default().push(i);
        }
        let mut recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut ndcgs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&u, rel_items) in &by_user {
            let mut scored: Vec<(f64, u32)> = (0..g.num_items() as u32)
                .filter(|&i| !g.has_edge(u as usize, i as usize))
                .map(|i| (dot(base_u.row(u as usize), base_i.row(i as usize)), i))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let ranking: Vec<u32> = scored.into_iter().map(|(_, i)| i).collect();
            for &k in ks {
                let hits: Vec<usize> = ranking
                    .iter()
                    .take(k)
                    .enumerate()
                    .filter(|(_, i)| rel_items.contains(i))
                    .map(|(p, _)| p + 1)
                    .collect();
                recalls.entry(k).or_default().push(hits.len() as f64 / rel_items.len() as f64);
                let dcg: f64 = hits.iter().map(|&p| 1.0 / ((p + 1) as f64).log2()).sum();
                let idcg: f64 =
                    (1..=rel_items.len()).map(|p| 1.0 / ((p + 1) as f64).log2()).sum();
                ndcgs.entry(k).or_default().push(dcg / idcg);
            }
        }
        let n = by_user.len();
        let avg = |m: BTreeMap<usize, Vec<f64>>| {
            m.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / n as f64)).collect()
        };
        (avg(recalls), avg(ndcgs), n)
    }

    #[test]
    fn evaluate_matches_brute_force_reference() {
        for seed in 0..50 {
            let (g, base_u, base_i, test) = random_instance(seed, 3 + (seed as usize % 8), 12);
            if test.is_empty() {
                continue;
            }
            let ks = [1, 3, 5];
            let report = evaluate_from_base(&base_u, &base_i, &g, &test, &ks);
            let (recall_o, ndcg_o, n_o) = evaluate_oracle(&base_u, &base_i, &g, &test, &ks);
            assert_eq!(report.num_evaluated_users, n_o);
            for &k in &ks {
                assert!((report.recall_at(k) - recall_o[&k]).abs() <= 1e-9, "seed {seed} k {k}");
                assert!((report.ndcg_at(k) - ndcg_o[&k]).abs() <= 1e-9, "seed {seed} k {k}");
            }
        }
    }

    #[test]
    fn evaluate_reports_requested_ks_and_perfect_model() {
        let g = InteractionGraph::from_edges(2, 6, &[(0, 0), (1, 1)]).unwrap();
        let test = vec![(0u32, 2u32), (1, 3)];
        // +inf-like scores for test items via aligned embeddings
        let mut base_u = Mat::zeros(2, 6);
        base_u.set(0, 2, 100.0);
        base_u.set(1, 3, 100.0);
        let base_i = Mat::from_fn(6, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        let report = evaluate_from_base(&base_u, &base_i, &g, &test, &[1, 5]);
        assert_eq!(report.recall.keys().copied().collect::<Vec<_>>(), vec![1, 5]);
        assert!((report.recall_at(1) - 1.0).abs() < 1e-12);
        assert!((report.ndcg_at(5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparsity_uniform_degrees_equal_groups() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..12u32 {
            for j in 0..3u32 {
                train.push((u, (u * 3 + j) % 20));
            }
            test.push((u, (u * 7 + 5) % 20));
        }
        let g = InteractionGraph::from_edges(12, 20, &train).unwrap();
        let params = ParameterSet::zeros(12, 20, 4, 2, 4, 4);
        let report = sparsity_report(&params, &g, &test, 2, 4).unwrap();
        assert_eq!(report.user_counts, vec![3, 3, 3, 3]);
    }

    #[test]
    fn sparsity_masses_balanced_on_synthetic_degrees() {
        // degree sequence 1..=24: total 300, 4 groups of ~75
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..24u32 {
            for j in 0..=u {
                train.push((u, j % 40));
            }
            test.push((u, (u + 17) % 40));
        }
        let g = InteractionGraph::from_edges(24, 40, &train).unwrap();
        let params = ParameterSet::zeros(24, 40, 4, 2, 4, 4);
        let report = sparsity_report(&params, &g, &test, 2, 4).unwrap();
        let total: usize = report.masses.iter().sum();
        let target = total as f64 / 4.0;
        for &m in &report.masses {
            assert!((m as f64 - target).abs() <= 0.10 * total as f64, "masses {:?}", report.masses);
        }
        assert_eq!(report.user_counts.iter().sum::<usize>(), 24);
    }

    #[test]
    fn sparsity_errors_with_too_few_users() {
        let g = InteractionGraph::from_edges(2, 3, &[(0, 0), (1, 1)]).unwrap();
        let params = ParameterSet::zeros(2, 3, 2, 1, 2, 2);
        assert!(sparsity_report(&params, &g, &[(0, 2)], 1, 4).is_err());
    }

    #[test]
    fn export_roundtrip_and_shapes() {
        let g = InteractionGraph::from_edges(3, 4, &[(0, 0), (1, 1), (2, 2), (2, 3)]).unwrap();
        let mut rng = stream_rng(21, Stream::Init);
        let mut params = ParameterSet::zeros(3, 4, 4, 2, 5, 4);
        for (_, t) in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let xu = Mat::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let xi = Mat::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("embeddings");
        let paths =
            export_embeddings(&params, &g, &xu, &xi, 2, DegreeMode::Original, &prefix).unwrap();
        assert!(paths[0].ends_with("embeddings.base.emb"));
        assert!(paths[1].ends_with("embeddings.intent.emb"));
        assert!(paths[2].ends_with("embeddings.text.emb"));
        for p in &paths {
            let m = crate::corpus::read_semantic_matrix(p).unwrap();
            assert_eq!(m.rows, 3 + 4);
            assert_eq!(m.cols, 4);
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_monotone_in_k(seed in 0u64..300) {
            let mut rng = stream_rng(seed, Stream::Synth);
            let ranked: Vec<u32> = {
                let mut v: Vec<u32> = (0..30).collect();
                for i in (1..v.len()).rev() {
                    v.swap(i, rng.gen_range(0..=i));
                }
                v
            };
            let relevant: HashSet<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..30)).collect();
            let mut prev_r = 0.0;
            let mut prev_n = 0.0;
            for k in 1..=30 {
                let r = recall_at_k(&ranked, &relevant, k);
                let n = ndcg_at_k(&ranked, &relevant, k);
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0).contains(&n));
                prop_assert!(r >= prev_r - 1e-12);
                prop_assert!(n >= prev_n - 1e-12);
                prev_r = r;
                prev_n = n;
            }
        }
    }
}
