//! Multi-intent fusion forward pass: LightGCN-style propagation, the text
//! tower, prototype attention, GSL edge masking, and score prediction.

use crate::corpus::{Batch, InteractionGraph};
use crate::error::{Error, Result};
use crate::mat::{self, cosine, dot, norm, softmax_rows, Mat, ZERO_NORM_EPS};

/// Negative slope of the text tower's LeakyReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// All trainable tensors. Biases are 1×n matrices so optimizer, EMA,
/// checkpoint and gradient-check code can treat every tensor uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub user_emb: Mat,        // M×d
    pub item_emb: Mat,        // N×d
    pub user_prototypes: Mat, // K×d
    pub item_prototypes: Mat, // K×d
    pub text_w1: Mat,         // d_t×h
    pub text_b1: Mat,         // 1×h
    pub text_w2: Mat,         // h×d
    pub text_b2: Mat,         // 1×d
}

/// Fixed tensor order used everywhere tensors are enumerated.
pub const TENSOR_NAMES: [&str; 8] = [
    "user_emb",
    "item_emb",
    "user_prototypes",
    "item_prototypes",
    "text_w1",
    "text_b1",
    "text_w2",
    "text_b2",
];

impl ParameterSet {
    /// All-zero parameters with the given shapes (also used as a gradient
    /// accumulator).
    pub fn zeros(num_users: usize, num_items: usize, d: usize, k: usize, d_t: usize, h: usize) -> Self {
        ParameterSet {
            user_emb: Mat::zeros(num_users, d),
            item_emb: Mat::zeros(num_items, d),
            user_prototypes: Mat::zeros(k, d),
            item_prototypes: Mat::zeros(k, d),
            text_w1: Mat::zeros(d_t, h),
            text_b1: Mat::zeros(1, h),
            text_w2: Mat::zeros(h, d),
            text_b2: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(other: &ParameterSet) -> Self {
        let mut p = other.clone();
        for (_, t) in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 8] {
        [
            (TENSOR_NAMES[0], &self.user_emb),
            (TENSOR_NAMES[1], &self.item_emb),
            (TENSOR_NAMES[2], &self.user_prototypes),
            (TENSOR_NAMES[3], &self.item_prototypes),
            (TENSOR_NAMES[4], &self.text_w1),
            (TENSOR_NAMES[5], &self.text_b1),
            (TENSOR_NAMES[6], &self.text_w2),
            (TENSOR_NAMES[7], &self.text_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 8] {
        [
            (TENSOR_NAMES[0], &mut self.user_emb),
            (TENSOR_NAMES[1], &mut self.item_emb),
            (TENSOR_NAMES[2], &mut self.user_prototypes),
            (TENSOR_NAMES[3], &mut self.item_prototypes),
            (TENSOR_NAMES[4], &mut self.text_w1),
            (TENSOR_NAMES[5], &mut self.text_b1),
            (TENSOR_NAMES[6], &mut self.text_w2),
            (TENSOR_NAMES[7], &mut self.text_b2),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.squared_norm()).sum()
    }

    /// Round every tensor through f32 (checkpoint storage precision).
    pub fn quantized(&self) -> ParameterSet {
        ParameterSet {
            user_emb: self.user_emb.quantized(),
            item_emb: self.item_emb.quantized(),
            user_prototypes: self.user_prototypes.quantized(),
            item_prototypes: self.item_prototypes.quantized(),
            text_w1: self.text_w1.quantized(),
            text_b1: self.text_b1.quantized(),
            text_w2: self.text_w2.quantized(),
            text_b2: self.text_b2.quantized(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn num_prototypes(&self) -> usize {
        self.user_prototypes.rows()
    }
}

/// Which normalizer Eq-style edge masks divide by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeMode {
    /// Degree of the unmasked graph (constant per node).
    Original,
    /// Sum of incident mask weights (renormalizes the masked graph).
    Masked,
}

/// Node subset a forward pass materializes refined intents and text
/// embeddings for. Training restricts to batch-touched nodes; evaluation and
/// export use `All`. Restriction is exact: refined rows of in-scope nodes
/// depend only on their incident edges.
#[derive(Debug, Clone)]
pub enum Scope {
    All,
    Nodes { users: Vec<u32>, items: Vec<u32> },
}

impl Scope {
    pub fn from_batch(batch: &Batch) -> Scope {
        let mut users = batch.users.clone();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<u32> =
            batch.pos_items.iter().chain(batch.neg_items.iter()).cloned().collect();
        items.sort_unstable();
        items.dedup();
        Scope::Nodes { users, items }
    }

    fn users(&self, num_users: usize) -> Vec<u32> {
        match self {
            Scope::All => (0..num_users as u32).collect(),
            Scope::Nodes { users, .. } => users.clone(),
        }
    }

    fn items(&self, num_items: usize) -> Vec<u32> {
        match self {
            Scope::All => (0..num_items as u32).collect(),
            Scope::Nodes { items, .. } => items.clone(),
        }
    }
}

/// Forward-pass controls; a subset of the train config.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub layers: usize,
    pub degree_mode: DegreeMode,
    pub scope: Scope,
    /// Prototype attention + GSL + refinement. Off for plain base-model runs.
    pub compute_intents: bool,
    pub compute_text: bool,
}

impl ForwardOptions {
    pub fn full(layers: usize, degree_mode: DegreeMode) -> Self {
        ForwardOptions {
            layers,
            degree_mode,
            scope: Scope::All,
            compute_intents: true,
            compute_text: true,
        }
    }
}

/// Per-layer GSL mask values.
#[derive(Debug, Clone)]
pub struct MaskedGraph {
    /// Shifted-cosine weight per edge id; only in-scope edges are filled.
    pub alpha: Vec<f64>,
    /// Per-user normalizer the user-side mask divides by.
    pub user_norm: Vec<f64>,
    /// Per-item normalizer the item-side mask divides by.
    pub item_norm: Vec<f64>,
    /// Edge ids the mask was computed for.
    pub edge_ids: Vec<u32>,
}

impl MaskedGraph {
    /// User-side mask value `M_ui = alpha / norm(u)`.
    pub fn user_mask(&self, edge_id: u32, user: usize) -> f64 {
        let n = self.user_norm[user];
        if n > 0.0 {
            self.alpha[edge_id as usize] / n
        } else {
            0.0
        }
    }

    /// Item-side mask value `M_iu = alpha / norm(i)`.
    pub fn item_mask(&self, edge_id: u32, item: usize) -> f64 {
        let n = self.item_norm[item];
        if n > 0.0 {
            self.alpha[edge_id as usize] / n
        } else {
            0.0
        }
    }
}

/// Everything a forward pass produces; gradient code consumes it as-is.
#[derive(Debug, Clone)]
pub struct ForwardActivations {
    /// LightGCN layer embeddings, layers 0..=L.
    pub user_layers: Vec<Mat>,
    pub item_layers: Vec<Mat>,
    /// Mean over layers 0..=L; the ranking/score embedding.
    pub base_user: Mat,
    pub base_item: Mat,
    /// Text tower outputs z (scoped rows).
    pub text_user: Mat,
    pub text_item: Mat,
    /// Text tower pre-activations, kept for the backward pass.
    pub text_hidden_user: Mat,
    pub text_hidden_item: Mat,
    /// Prototype attention per layer 1..=L (all rows).
    pub attn_user: Vec<Mat>,
    pub attn_item: Vec<Mat>,
    /// Intent-aware embeddings r per layer 1..=L (all rows).
    pub raw_user: Vec<Mat>,
    pub raw_item: Vec<Mat>,
    /// GSL masks per layer 1..=L (scoped edges).
    pub masks: Vec<MaskedGraph>,
    /// Refined intents per layer 1..=L (scoped rows).
    pub refined_user: Vec<Mat>,
    pub refined_item: Vec<Mat>,
    /// Mean of refined intents over layers 1..=L.
    pub refined_user_mean: Mat,
    pub refined_item_mean: Mat,
    /// Users/items/edges the scoped parts were computed for.
    pub scoped_users: Vec<u32>,
    pub scoped_items: Vec<u32>,
    pub scoped_edges: Vec<u32>,
}

/// Symmetric-normalized bipartite propagation. Returns embeddings per layer
/// 0..=L plus the layer mean. Isolated nodes propagate to zero vectors.
pub fn graph_propagate(
    params: &ParameterSet,
    graph: &InteractionGraph,
    layers: usize,
) -> (Vec<Mat>, Vec<Mat>, Mat, Mat) {
    assert!(layers >= 1, "propagation needs at least one layer");
    let d = params.embedding_dim();
    let mut user_layers = vec![params.user_emb.clone()];
    let mut item_layers = vec![params.item_emb.clone()];
    for l in 1..=layers {
        let prev_u = &user_layers[l - 1];
        let prev_i = &item_layers[l - 1];
        let mut next_u = Mat::zeros(graph.num_users(), d);
        let mut next_i = Mat::zeros(graph.num_items(), d);
        for &(u, i) in graph.edges() {
            let w = graph.norm_weight(u as usize, i as usize);
            mat::axpy(w, prev_i.row(i as usize), next_u.row_mut(u as usize));
            mat::axpy(w, prev_u.row(u as usize), next_i.row_mut(i as usize));
        }
        user_layers.push(next_u);
        item_layers.push(next_i);
    }
    let base_user = layer_mean(&user_layers);
    let base_item = layer_mean(&item_layers);
    (user_layers, item_layers, base_user, base_item)
}

fn layer_mean(layers: &[Mat]) -> Mat {
    let mut mean = Mat::zeros(layers[0].rows(), layers[0].cols());
    let w = 1.0 / layers.len() as f64;
    for layer in layers {
        mean.scale_add(1.0, layer, w);
    }
    mean
}

/// Two-layer MLP text tower: `z = LeakyReLU(x·W1 + b1)·W2 + b2`, row-wise.
/// Returns (z, pre-activation hidden) over all rows.
pub fn text_encode(params: &ParameterSet, semantic: &Mat) -> Result<(Mat, Mat)> {
    text_encode_rows(params, semantic, None)
}

/// Scoped variant: `rows = Some(indices)` computes only those rows, leaving
/// the rest zero.
pub fn text_encode_rows(params: &ParameterSet, semantic: &Mat, rows: Option<&[u32]>) -> Result<(Mat, Mat)> {
    if semantic.cols() != params.text_w1.rows() {
        return Err(Error::Config(format!(
            "semantic width {} does not match text tower input {}",
            semantic.cols(),
            params.text_w1.rows()
        )));
    }
    if !semantic.is_finite() {
        return Err(Error::Numeric("text encoder input contains non-finite values".into()));
    }
    let h = params.text_w1.cols();
    let d = params.text_w2.cols();
    let mut hidden = Mat::zeros(semantic.rows(), h);
    let mut z = Mat::zeros(semantic.rows(), d);
    let all: Vec<u32>;
    let row_set: &[u32] = match rows {
        Some(r) => r,
        None => {
            all = (0..semantic.rows() as u32).collect();
            &all
        }
    };
    for &r in row_set {
        let r = r as usize;
        let x = semantic.row(r);
        let hrow = hidden.row_mut(r);
        for (j, hj) in hrow.iter_mut().enumerate() {
            let mut acc = params.text_b1.get(0, j);
            for (k, &xv) in x.iter().enumerate() {
                acc += xv * params.text_w1.get(k, j);
            }
            *hj = acc;
        }
        let zrow = z.row_mut(r);
        for (j, zj) in zrow.iter_mut().enumerate() {
            let mut acc = params.text_b2.get(0, j);
            for k in 0..h {
                acc += leaky_relu(hidden.get(r, k)) * params.text_w2.get(k, j);
            }
            *zj = acc;
        }
    }
    Ok((z, hidden))
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_RELU_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_RELU_SLOPE
    }
}

/// Softmax attention over intent prototypes: `P(c^k|e) = softmax_k(e·c^k)`,
/// and the expected intent `r = Σ_k c^k P(c^k|e)`.
pub fn intent_attention(embeddings: &Mat, prototypes: &Mat) -> (Mat, Mat) {
    assert!(prototypes.rows() >= 1);
    let mut attn = embeddings.matmul_t(prototypes);
    softmax_rows(&mut attn);
    let raw = attn.matmul(prototypes);
    (attn, raw)
}

/// GSL edge mask from shifted cosine between user and item intents, full
/// graph scope.
pub fn gsl_mask(
    raw_user: &Mat,
    raw_item: &Mat,
    graph: &InteractionGraph,
    degree_mode: DegreeMode,
) -> MaskedGraph {
    let all_edges: Vec<u32> = (0..graph.num_edges() as u32).collect();
    gsl_mask_scoped(raw_user, raw_item, graph, degree_mode, &all_edges)
}

/// Masks for a subset of edges. Normalizers are only valid at nodes whose
/// entire incidence is inside `edge_ids`.
pub fn gsl_mask_scoped(
    raw_user: &Mat,
    raw_item: &Mat,
    graph: &InteractionGraph,
    degree_mode: DegreeMode,
    edge_ids: &[u32],
) -> MaskedGraph {
    let mut alpha = vec![0.0; graph.num_edges()];
    for &eid in edge_ids {
        let (u, i) = graph.edges()[eid as usize];
        let c = cosine(raw_user.row(u as usize), raw_item.row(i as usize));
        alpha[eid as usize] = (c + 1.0) / 2.0;
    }
    let mut user_norm = vec![0.0; graph.num_users()];
    let mut item_norm = vec![0.0; graph.num_items()];
    match degree_mode {
        DegreeMode::Original => {
            for u in 0..graph.num_users() {
                user_norm[u] = graph.user_degree(u) as f64;
            }
            for i in 0..graph.num_items() {
                item_norm[i] = graph.item_degree(i) as f64;
            }
        }
        DegreeMode::Masked => {
            for &eid in edge_ids {
                let (u, i) = graph.edges()[eid as usize];
                user_norm[u as usize] += alpha[eid as usize];
                item_norm[i as usize] += alpha[eid as usize];
            }
        }
    }
    MaskedGraph { alpha, user_norm, item_norm, edge_ids: edge_ids.to_vec() }
}

/// Masked bipartite propagation of intents: each user gathers masked item
/// intents and vice versa. Only `users`/`items` rows are produced.
pub fn intent_refine_scoped(
    raw_user: &Mat,
    raw_item: &Mat,
    mask: &MaskedGraph,
    graph: &InteractionGraph,
    users: &[u32],
    items: &[u32],
) -> (Mat, Mat) {
    let d = raw_user.cols();
    let mut refined_user = Mat::zeros(graph.num_users(), d);
    let mut refined_item = Mat::zeros(graph.num_items(), d);
    for &u in users {
        let out = refined_user.row_mut(u as usize);
        for &(i, eid) in graph.user_neighbors(u as usize) {
            let m = mask.user_mask(eid, u as usize);
            if m != 0.0 {
                mat::axpy(m, raw_item.row(i as usize), out);
            }
        }
    }
    for &i in items {
        let out = refined_item.row_mut(i as usize);
        for &(u, eid) in graph.item_neighbors(i as usize) {
            let m = mask.item_mask(eid, i as usize);
            if m != 0.0 {
                mat::axpy(m, raw_user.row(u as usize), out);
            }
        }
    }
    (refined_user, refined_item)
}

/// Full-scope refinement (the spec-level operation).
pub fn intent_refine(
    raw_user: &Mat,
    raw_item: &Mat,
    mask: &MaskedGraph,
    graph: &InteractionGraph,
) -> (Mat, Mat) {
    let users: Vec<u32> = (0..graph.num_users() as u32).collect();
    let items: Vec<u32> = (0..graph.num_items() as u32).collect();
    intent_refine_scoped(raw_user, raw_item, mask, graph, &users, &items)
}

/// Compose propagation, the text tower, attention, masking, and refinement.
/// Pure: identical inputs produce identical activations.
pub fn forward(
    params: &ParameterSet,
    graph: &InteractionGraph,
    semantic_user: &Mat,
    semantic_item: &Mat,
    opts: &ForwardOptions,
) -> Result<ForwardActivations> {
    let (user_layers, item_layers, base_user, base_item) =
        graph_propagate(params, graph, opts.layers);

    let scoped_users = opts.scope.users(graph.num_users());
    let scoped_items = opts.scope.items(graph.num_items());
    let scoped_edges: Vec<u32> = match &opts.scope {
        Scope::All => (0..graph.num_edges() as u32).collect(),
        Scope::Nodes { users, items } => {
            let mut ids = Vec::new();
            for &u in users {
                ids.extend(graph.user_neighbors(u as usize).iter().map(|&(_, e)| e));
            }
            for &i in items {
                ids.extend(graph.item_neighbors(i as usize).iter().map(|&(_, e)| e));
            }
            ids.sort_unstable();
            ids.dedup();
            ids
        }
    };

    let (text_user, text_hidden_user, text_item, text_hidden_item) = if opts.compute_text {
        let (zu, hu) = text_encode_rows(params, semantic_user, Some(&scoped_users))?;
        let (zi, hi) = text_encode_rows(params, semantic_item, Some(&scoped_items))?;
        (zu, hu, zi, hi)
    } else {
        (
            Mat::zeros(graph.num_users(), params.embedding_dim()),
            Mat::zeros(graph.num_users(), params.text_w1.cols()),
            Mat::zeros(graph.num_items(), params.embedding_dim()),
            Mat::zeros(graph.num_items(), params.text_w1.cols()),
        )
    };

    let d = params.embedding_dim();
    let mut attn_user = Vec::new();
    let mut attn_item = Vec::new();
    let mut raw_user = Vec::new();
    let mut raw_item = Vec::new();
    let mut masks = Vec::new();
    let mut refined_user = Vec::new();
    let mut refined_item = Vec::new();
    let mut refined_user_mean = Mat::zeros(graph.num_users(), d);
    let mut refined_item_mean = Mat::zeros(graph.num_items(), d);

    if opts.compute_intents {
        for l in 1..=opts.layers {
            let (pu, ru) = intent_attention(&user_layers[l], &params.user_prototypes);
            let (pi, ri) = intent_attention(&item_layers[l], &params.item_prototypes);
            let mask = gsl_mask_scoped(&ru, &ri, graph, opts.degree_mode, &scoped_edges);
            let (refu, refi) =
                intent_refine_scoped(&ru, &ri, &mask, graph, &scoped_users, &scoped_items);
            refined_user_mean.scale_add(1.0, &refu, 1.0 / opts.layers as f64);
            refined_item_mean.scale_add(1.0, &refi, 1.0 / opts.layers as f64);
            attn_user.push(pu);
            attn_item.push(pi);
            raw_user.push(ru);
            raw_item.push(ri);
            masks.push(mask);
            refined_user.push(refu);
            refined_item.push(refi);
        }
    }

    Ok(ForwardActivations {
        user_layers,
        item_layers,
        base_user,
        base_item,
        text_user,
        text_item,
        text_hidden_user,
        text_hidden_item,
        attn_user,
        attn_item,
        raw_user,
        raw_item,
        masks,
        refined_user,
        refined_item,
        refined_user_mean,
        refined_item_mean,
        scoped_users,
        scoped_items,
        scoped_edges,
    })
}

/// Interaction-intent source for the alignment losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphVariant {
    /// Refined intents from attention + GSL (the full model).
    Full,
    /// Ablation: align the raw ID embeddings directly.
    EmbeddingOnly,
}

/// Text-intent source for the alignment losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextVariant {
    /// The trainable two-layer tower.
    Tower,
    /// Ablation: a frozen random projection of the raw semantics.
    FrozenProjection,
}

/// Forward controls plus the alignment-row sourcing for one model variant.
#[derive(Debug, Clone)]
pub struct StackOptions<'a> {
    pub layers: usize,
    pub degree_mode: DegreeMode,
    pub graph_variant: GraphVariant,
    pub text_variant: TextVariant,
    /// Required when `text_variant` is `FrozenProjection`.
    pub frozen_projection: Option<&'a Mat>,
}

impl StackOptions<'_> {
    pub fn forward_options(&self, scope: Scope) -> ForwardOptions {
        ForwardOptions {
            layers: self.layers,
            degree_mode: self.degree_mode,
            scope,
            compute_intents: self.graph_variant == GraphVariant::Full,
            compute_text: self.text_variant == TextVariant::Tower,
        }
    }
}

/// Full per-entity row matrices feeding the alignment losses under the
/// configured variant: (intent users, intent items, text users, text items).
pub fn variant_rows(
    params: &ParameterSet,
    acts: &ForwardActivations,
    semantic_user: &Mat,
    semantic_item: &Mat,
    opts: &StackOptions,
) -> Result<(Mat, Mat, Mat, Mat)> {
    let (intent_u, intent_i) = match opts.graph_variant {
        GraphVariant::Full => (acts.refined_user_mean.clone(), acts.refined_item_mean.clone()),
        GraphVariant::EmbeddingOnly => (params.user_emb.clone(), params.item_emb.clone()),
    };
    let (text_u, text_i) = match opts.text_variant {
        TextVariant::Tower => (acts.text_user.clone(), acts.text_item.clone()),
        TextVariant::FrozenProjection => {
            let proj = opts.frozen_projection.ok_or_else(|| {
                Error::Config("text variant frozen-projection requires a projection matrix".into())
            })?;
            (semantic_user.matmul(proj), semantic_item.matmul(proj))
        }
    };
    Ok((intent_u, intent_i, text_u, text_i))
}

/// Stack batch rows as `users ++ positives ++ negatives` (3B×d).
pub fn gather_batch_stack(user_rows: &Mat, item_rows: &Mat, batch: &Batch) -> Mat {
    Mat::vstack(&[
        &user_rows.gather_rows(&batch.users),
        &item_rows.gather_rows(&batch.pos_items),
        &item_rows.gather_rows(&batch.neg_items),
    ])
}

/// Run a scoped forward under `opts` and return the batch-aligned
/// (interaction-intent, text) stacks.
pub fn batch_stacks(
    params: &ParameterSet,
    graph: &InteractionGraph,
    semantic_user: &Mat,
    semantic_item: &Mat,
    batch: &Batch,
    opts: &StackOptions,
) -> Result<(Mat, Mat)> {
    let fwd = forward(
        params,
        graph,
        semantic_user,
        semantic_item,
        &opts.forward_options(Scope::from_batch(batch)),
    )?;
    let (iu, ii, tu, ti) = variant_rows(params, &fwd, semantic_user, semantic_item, opts)?;
    Ok((gather_batch_stack(&iu, &ii, batch), gather_batch_stack(&tu, &ti, batch)))
}

/// Edge-existence probability: sigmoid of the embedding dot product.
/// Ranking uses the raw dot product, a monotone equivalent.
pub fn predict_score(user_vec: &[f64], item_vec: &[f64]) -> f64 {
    sigmoid(dot(user_vec, item_vec))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row norms used by cosine backward passes; zero-norm rows report 0.
pub fn row_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let n = norm(m.row(r));
            if n <= ZERO_NORM_EPS {
                0.0
            } else {
                n
            }
        })
        .collect()
}
