//! Parameter initialization, the multi-task training loop with early
//! stopping, checkpointing, and the finite-difference gradient verifier.

mod adam;
mod backward;
mod checkpoint;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use backward::{compute_gradients, loss_value, LossBreakdown, LossContext, TermGates};
pub use checkpoint::Checkpoint;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{sample_negative, Batch, DataSplit, InteractionGraph, SemanticMatrix};
use crate::encoders::{
    DegreeMode, GraphVariant, ParameterSet, StackOptions, TextVariant,
};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::mat::Mat;
use crate::momentum::{ema_update, init_teacher, teacher_similarities, TeacherState};
use crate::objectives::{perturb_with, LossWeights};
use crate::rng::{seeded_rng, stream_rng, Stream};

/// Every training hyperparameter. Serialized into checkpoints as the config
/// snapshot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    /// Text-tower hidden width; defaults to the rounded mean of the semantic
    /// and embedding widths.
    pub text_hidden_dim: Option<usize>,
    pub num_prototypes: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub beta_ema: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation NDCG@20 improvement.
    pub patience: usize,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    pub degree_mode: DegreeMode,
    /// Recompute refined intents for every node each step instead of only
    /// batch-touched nodes. Identical results, more work.
    pub gsl_full_graph: bool,
    pub graph_variant: GraphVariant,
    pub text_variant: TextVariant,
    /// Teacher pseudo-labels from noised stacks instead of clean ones.
    pub teacher_uses_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 32,
            text_hidden_dim: None,
            num_prototypes: 32,
            layers: 2,
            batch_size: 4096,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            beta_ema: 0.999,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            eval_ks: vec![5, 10, 20],
            degree_mode: DegreeMode::Original,
            gsl_full_graph: false,
            graph_variant: GraphVariant::Full,
            text_variant: TextVariant::Tower,
            teacher_uses_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0
            || self.num_prototypes == 0
            || self.layers == 0
            || self.batch_size == 0
            || self.max_epochs == 0
        {
            return Err(Error::Config("dimensions, layers, batch and epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_ema) {
            return Err(Error::Config("beta_ema must lie in [0, 1]".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval_ks must be non-empty, ascending, duplicate-free".into()));
        }
        if self.eval_ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval cutoffs must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn hidden_dim(&self, semantic_dim: usize) -> usize {
        self.text_hidden_dim.unwrap_or((semantic_dim + self.embedding_dim + 1) / 2)
    }

    pub fn stack_opts<'a>(&self, frozen_projection: Option<&'a Mat>) -> StackOptions<'a> {
        StackOptions {
            layers: self.layers,
            degree_mode: self.degree_mode,
            graph_variant: self.graph_variant,
            text_variant: self.text_variant,
            frozen_projection,
        }
    }
}

/// Xavier-uniform initialization: weights in ±sqrt(6/(rows+cols)), biases
/// zero, prototypes over (K, d).
pub fn init_params(
    num_users: usize,
    num_items: usize,
    semantic_dim: usize,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> ParameterSet {
    let d = config.embedding_dim;
    let k = config.num_prototypes;
    let h = config.hidden_dim(semantic_dim);
    let mut params = ParameterSet::zeros(num_users, num_items, d, k, semantic_dim, h);
    let mut tensors = params.tensors_mut();
    for (name, tensor) in tensors.iter_mut() {
        if name.starts_with("text_b") {
            continue; // biases stay zero
        }
        let bound = xavier_bound(tensor.rows(), tensor.cols());
        for v in tensor.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    params
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// One row of the metric trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bpr: f64,
    pub loss_ia: f64,
    pub loss_itm: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
}

pub const TRACE_HEADER: &str = "epoch,loss_total,loss_bpr,loss_ia,loss_itm,val_recall@20,val_ndcg@20";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.loss_total,
            self.loss_bpr,
            self.loss_ia,
            self.loss_itm,
            self.val_recall20,
            self.val_ndcg20
        )
    }
}

/// Result of a training run: the best checkpoint, the per-epoch trace, and
/// whether the run aborted on a numeric failure.
#[derive(Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochStats>,
    pub diverged: bool,
}

/// Train with shuffled mini-batches, Adam, EMA teacher updates, per-epoch
/// validation, and early stopping on validation NDCG@20. Validation runs on
/// an f32-quantized parameter snapshot — the exact state a saved checkpoint
/// reproduces.
pub fn fit(
    graph: &InteractionGraph,
    split: &DataSplit,
    semantic_user: &SemanticMatrix,
    semantic_item: &SemanticMatrix,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    crate::corpus::check_matrix_rows(semantic_user, graph.num_users(), "user")?;
    crate::corpus::check_matrix_rows(semantic_item, graph.num_items(), "item")?;
    if semantic_user.cols != semantic_item.cols {
        return Err(Error::Config(format!(
            "user and item semantic widths differ: {} vs {}",
            semantic_user.cols, semantic_item.cols
        )));
    }
    if graph.num_edges() == 0 {
        return Err(Error::Data("training graph has no edges".into()));
    }

    let sem_u = semantic_user.to_mat();
    let sem_i = semantic_item.to_mat();
    let d_t = sem_u.cols();
    let d = config.embedding_dim;

    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut sampling_rng = stream_rng(config.seed, Stream::Sampling);
    let mut noise_rng = stream_rng(config.seed, Stream::Noise);

    let mut params = init_params(graph.num_users(), graph.num_items(), d_t, config, &mut init_rng);
    let frozen_projection = match config.text_variant {
        TextVariant::FrozenProjection => Some(frozen_projection(d_t, d, config.seed)),
        TextVariant::Tower => None,
    };
    let mut teacher = init_teacher(&params, config.beta_ema);
    let mut optimizer = OptimizerState::new(&params);

    let gates = TermGates::from_weights(&config.weights);
    let mut best: Option<Checkpoint> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut trace = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 1..=config.max_epochs {
        let fallback_params = params.clone();
        let fallback_teacher = teacher.clone();
        let fallback_optimizer = optimizer.clone();

        let mut order: Vec<u32> = (0..graph.num_edges() as u32).collect();
        order.shuffle(&mut sampling_rng);

        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = assemble_batch(graph, chunk, &mut sampling_rng)?;
            let stack_rows = 3 * batch.len();
            let (noise_intent, noise_text) = if gates.translation {
                (
                    Some(gaussian_mat(stack_rows, d, &mut noise_rng)),
                    Some(gaussian_mat(stack_rows, d, &mut noise_rng)),
                )
            } else {
                (None, None)
            };
            let teacher_t2i = if gates.distill {
                Some(teacher_sims(
                    &teacher,
                    graph,
                    &sem_u,
                    &sem_i,
                    &batch,
                    config,
                    frozen_projection.as_ref(),
                    noise_intent.as_ref(),
                    noise_text.as_ref(),
                )?)
            } else {
                None
            };
            let ctx = LossContext {
                graph,
                semantic_user: &sem_u,
                semantic_item: &sem_i,
                batch: &batch,
                weights: &config.weights,
                stack_opts: config.stack_opts(frozen_projection.as_ref()),
                full_scope: config.gsl_full_graph,
                noise_intent: noise_intent.as_ref(),
                noise_text: noise_text.as_ref(),
                teacher_t2i: teacher_t2i.as_ref(),
            };
            let step_result = compute_gradients(&params, &ctx);
            let (grads, breakdown) = match step_result {
                Ok(ok) => ok,
                Err(Error::Numeric(_)) => {
                    params = fallback_params;
                    teacher = fallback_teacher;
                    optimizer = fallback_optimizer;
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut params, &grads, &mut optimizer, config.learning_rate);
            if !params.is_finite() {
                params = fallback_params;
                teacher = fallback_teacher;
                optimizer = fallback_optimizer;
                diverged = true;
                break 'epochs;
            }
            ema_update(&mut teacher, &params, config.beta_ema)?;
            sums[0] += breakdown.total;
            sums[1] += breakdown.bpr;
            sums[2] += breakdown.ia;
            sums[3] += breakdown.itm;
            steps += 1;
        }

        let snapshot = params.quantized();
        let val =
            evalkit::evaluate(&snapshot, graph, &split.validation, config.layers, &[20]);
        let stats = EpochStats {
            epoch,
            loss_total: sums[0] / steps.max(1) as f64,
            loss_bpr: sums[1] / steps.max(1) as f64,
            loss_ia: sums[2] / steps.max(1) as f64,
            loss_itm: sums[3] / steps.max(1) as f64,
            val_recall20: val.recall_at(20),
            val_ndcg20: val.ndcg_at(20),
        };
        trace.push(stats.clone());

        if stats.val_ndcg20 > best_metric {
            best_metric = stats.val_ndcg20;
            since_best = 0;
            best = Some(Checkpoint::from_state(
                &params,
                &teacher,
                &optimizer,
                epoch,
                best_metric,
                config,
            ));
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }

    let checkpoint = match best {
        Some(c) => c,
        None => Checkpoint::from_state(
            &params,
            &teacher,
            &optimizer,
            trace.len(),
            best_metric.max(0.0),
            config,
        ),
    };
    Ok(FitOutcome { checkpoint, trace, diverged })
}

/// Deterministic frozen projection for the no-text ablation.
pub fn frozen_projection(semantic_dim: usize, embedding_dim: usize, seed: u64) -> Mat {
    let mut rng = seeded_rng(seed, "frozen-projection");
    let bound = xavier_bound(semantic_dim, embedding_dim);
    Mat::from_fn(semantic_dim, embedding_dim, |_, _| rng.gen_range(-bound..bound))
}

fn assemble_batch(
    graph: &InteractionGraph,
    edge_ids: &[u32],
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut users = Vec::with_capacity(edge_ids.len());
    let mut pos_items = Vec::with_capacity(edge_ids.len());
    let mut neg_items = Vec::with_capacity(edge_ids.len());
    for &eid in edge_ids {
        let (u, i) = graph.edges()[eid as usize];
        users.push(u);
        pos_items.push(i);
        neg_items.push(sample_negative(graph, u as usize, rng)?);
    }
    Ok(Batch { users, pos_items, neg_items })
}

fn gaussian_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[allow(clippy::too_many_arguments)]
fn teacher_sims(
    teacher: &TeacherState,
    graph: &InteractionGraph,
    sem_u: &Mat,
    sem_i: &Mat,
    batch: &Batch,
    config: &TrainConfig,
    frozen_projection: Option<&Mat>,
    noise_intent: Option<&Mat>,
    noise_text: Option<&Mat>,
) -> Result<Mat> {
    let opts = config.stack_opts(frozen_projection);
    if config.teacher_uses_noise {
        let (intent, text) =
            crate::encoders::batch_stacks(&teacher.shadow, graph, sem_u, sem_i, batch, &opts)?;
        let (eps_r, eps_z) = match (noise_intent, noise_text) {
            (Some(r), Some(z)) => (r, z),
            _ => {
                return Err(Error::Config(
                    "teacher_uses_noise requires the translation loss to be active".into(),
                ))
            }
        };
        let noised_intent = perturb_with(&intent, eps_r);
        let noised_text = perturb_with(&text, eps_z);
        Ok(noised_text.matmul_t(&noised_intent))
    } else {
        let (q_t2i, _) = teacher_similarities(teacher, graph, sem_u, sem_i, batch, &opts)?;
        Ok(q_t2i)
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Settings for one finite-difference comparison instance.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub weights: LossWeights,
    pub degree_mode: DegreeMode,
    pub graph_variant: GraphVariant,
    pub text_variant: TextVariant,
    pub num_users: usize,
    pub num_items: usize,
    pub embedding_dim: usize,
    pub num_prototypes: usize,
    pub layers: usize,
    pub semantic_dim: usize,
    pub batch_size: usize,
    /// Test hook: corrupt this tensor's analytic gradient before comparing.
    pub corrupt_tensor: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            weights: LossWeights {
                lambda1: 0.05,
                lambda2: 0.05,
                lambda3: 0.05,
                l2: 1e-3,
                ..LossWeights::default()
            },
            degree_mode: DegreeMode::Original,
            graph_variant: GraphVariant::Full,
            text_variant: TextVariant::Tower,
            num_users: 6,
            num_items: 8,
            embedding_dim: 4,
            num_prototypes: 3,
            layers: 2,
            semantic_dim: 6,
            batch_size: 4,
            corrupt_tensor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

pub const GRAD_CHECK_THRESHOLD: f64 = 1e-3;
const FD_STEP: f64 = 1e-4;

/// Compare analytic gradients against central finite differences on a random
/// tiny instance. Instances whose activations sit too close to a
/// non-differentiable kink (LeakyReLU zero crossings, near-zero cosine norms)
/// are redrawn deterministically.
pub fn gradient_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut attempt_seed = opts.seed;
    for _ in 0..50 {
        let instance = build_instance(opts, attempt_seed)?;
        if instance_well_conditioned(&instance, opts)? {
            return check_instance(&instance, opts);
        }
        attempt_seed = attempt_seed.wrapping_add(7919);
    }
    Err(Error::Numeric("could not draw a well-conditioned gradient-check instance".into()))
}

struct GradCheckInstance {
    graph: InteractionGraph,
    params: ParameterSet,
    sem_u: Mat,
    sem_i: Mat,
    batch: Batch,
    frozen_projection: Option<Mat>,
    noise_intent: Option<Mat>,
    noise_text: Option<Mat>,
    teacher_t2i: Option<Mat>,
}

impl GradCheckInstance {
    fn ctx<'a>(&'a self, opts: &'a GradCheckOptions) -> LossContext<'a> {
        LossContext {
            graph: &self.graph,
            semantic_user: &self.sem_u,
            semantic_item: &self.sem_i,
            batch: &self.batch,
            weights: &opts.weights,
            stack_opts: StackOptions {
                layers: opts.layers,
                degree_mode: opts.degree_mode,
                graph_variant: opts.graph_variant,
                text_variant: opts.text_variant,
                frozen_projection: self.frozen_projection.as_ref(),
            },
            full_scope: false,
            noise_intent: self.noise_intent.as_ref(),
            noise_text: self.noise_text.as_ref(),
            teacher_t2i: self.teacher_t2i.as_ref(),
        }
    }
}

fn build_instance(opts: &GradCheckOptions, seed: u64) -> Result<GradCheckInstance> {
    let mut rng = seeded_rng(seed, "gradcheck");
    let mut edges = Vec::new();
    for u in 0..opts.num_users as u32 {
        let deg = rng.gen_range(1..=3);
        for _ in 0..deg {
            edges.push((u, rng.gen_range(0..opts.num_items as u32)));
        }
    }
    let graph = InteractionGraph::from_edges(opts.num_users, opts.num_items, &edges)?;
    let config = TrainConfig {
        embedding_dim: opts.embedding_dim,
        num_prototypes: opts.num_prototypes,
        layers: opts.layers,
        ..TrainConfig::default()
    };
    let params = init_params(opts.num_users, opts.num_items, opts.semantic_dim, &config, &mut rng);
    let sem_u = Mat::from_fn(opts.num_users, opts.semantic_dim, |_, _| rng.gen_range(-1.0..1.0));
    let sem_i = Mat::from_fn(opts.num_items, opts.semantic_dim, |_, _| rng.gen_range(-1.0..1.0));
    let batch = crate::corpus::sample_bpr_batch(&graph, opts.batch_size, &mut rng)?;

    let frozen_projection = match opts.text_variant {
        TextVariant::FrozenProjection => {
            Some(frozen_projection(opts.semantic_dim, opts.embedding_dim, seed))
        }
        TextVariant::Tower => None,
    };

    let gates = TermGates::from_weights(&opts.weights);
    let rows = 3 * batch.len();
    let (noise_intent, noise_text) = if gates.translation {
        (
            Some(gaussian_mat(rows, opts.embedding_dim, &mut rng)),
            Some(gaussian_mat(rows, opts.embedding_dim, &mut rng)),
        )
    } else {
        (None, None)
    };

    let teacher_t2i = if gates.distill {
        // a teacher genuinely away from the student, as after EMA drift
        let mut shadow = params.clone();
        for (_, t) in shadow.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.gen_range(-1.0..1.0f64);
            }
        }
        let teacher = TeacherState { shadow, beta: 0.9 };
        let opts_stack = StackOptions {
            layers: opts.layers,
            degree_mode: opts.degree_mode,
            graph_variant: opts.graph_variant,
            text_variant: opts.text_variant,
            frozen_projection: frozen_projection.as_ref(),
        };
        let (q, _) = teacher_similarities(&teacher, &graph, &sem_u, &sem_i, &batch, &opts_stack)?;
        Some(q)
    } else {
        None
    };

    Ok(GradCheckInstance {
        graph,
        params,
        sem_u,
        sem_i,
        batch,
        frozen_projection,
        noise_intent,
        noise_text,
        teacher_t2i,
    })
}

/// Reject instances where the finite-difference step could straddle a
/// LeakyReLU kink or a cosine singularity.
fn instance_well_conditioned(inst: &GradCheckInstance, opts: &GradCheckOptions) -> Result<bool> {
    let fwd = crate::encoders::forward(
        &inst.params,
        &inst.graph,
        &inst.sem_u,
        &inst.sem_i,
        &crate::encoders::ForwardOptions {
            layers: opts.layers,
            degree_mode: opts.degree_mode,
            scope: crate::encoders::Scope::from_batch(&inst.batch),
            compute_intents: opts.graph_variant == GraphVariant::Full,
            compute_text: opts.text_variant == TextVariant::Tower,
        },
    )?;
    if opts.text_variant == TextVariant::Tower {
        for &r in &fwd.scoped_users {
            if fwd.text_hidden_user.row(r as usize).iter().any(|v| v.abs() < 1e-3) {
                return Ok(false);
            }
        }
        for &r in &fwd.scoped_items {
            if fwd.text_hidden_item.row(r as usize).iter().any(|v| v.abs() < 1e-3) {
                return Ok(false);
            }
        }
    }
    if opts.graph_variant == GraphVariant::Full {
        for l in 0..fwd.raw_user.len() {
            for &eid in &fwd.masks[l].edge_ids {
                let (u, i) = inst.graph.edges()[eid as usize];
                let a = fwd.raw_user[l].row(u as usize);
                let b = fwd.raw_item[l].row(i as usize);
                let na = crate::mat::norm(a);
                let nb = crate::mat::norm(b);
                if na < 1e-2 || nb < 1e-2 {
                    return Ok(false);
                }
                if crate::mat::cosine(a, b).abs() > 0.999 {
                    return Ok(false);
                }
            }
        }
    }
    // alignment rows must stay away from zero norm for cosine gradients
    let gates = TermGates::from_weights(&opts.weights);
    if gates.need_stacks() {
        let (iu, ii, tu, ti) = crate::encoders::variant_rows(
            &inst.params,
            &fwd,
            &inst.sem_u,
            &inst.sem_i,
            &StackOptions {
                layers: opts.layers,
                degree_mode: opts.degree_mode,
                graph_variant: opts.graph_variant,
                text_variant: opts.text_variant,
                frozen_projection: inst.frozen_projection.as_ref(),
            },
        )?;
        let intent = crate::encoders::gather_batch_stack(&iu, &ii, &inst.batch);
        let text = crate::encoders::gather_batch_stack(&tu, &ti, &inst.batch);
        for m in [&intent, &text] {
            for r in 0..m.rows() {
                if crate::mat::norm(m.row(r)) < 1e-2 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn check_instance(inst: &GradCheckInstance, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let ctx = inst.ctx(opts);
    let (mut analytic, _) = compute_gradients(&inst.params, &ctx)?;
    if let Some(name) = &opts.corrupt_tensor {
        let mut found = false;
        for (tname, tensor) in analytic.tensors_mut() {
            if tname == name {
                let v = tensor.get(0, 0);
                tensor.set(0, 0, v * 2.0 + 0.05);
                found = true;
            }
        }
        if !found {
            return Err(Error::Config(format!("unknown tensor to corrupt: {name}")));
        }
    }

    let mut tensors = Vec::new();
    let mut overall: f64 = 0.0;
    for (t_idx, (name, _)) in inst.params.tensors().iter().enumerate() {
        let len = inst.params.tensors()[t_idx].1.data().len();
        let mut tensor_max: f64 = 0.0;
        for idx in 0..len {
            let mut plus = inst.params.clone();
            plus.tensors_mut()[t_idx].1.data_mut()[idx] += FD_STEP;
            let lp = loss_value(&plus, &ctx)?.total;
            let mut minus = inst.params.clone();
            minus.tensors_mut()[t_idx].1.data_mut()[idx] -= FD_STEP;
            let lm = loss_value(&minus, &ctx)?.total;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let an = analytic.tensors()[t_idx].1.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            tensor_max = tensor_max.max(rel);
        }
        overall = overall.max(tensor_max);
        tensors.push(TensorCheck { name: name.to_string(), max_rel_err: tensor_max });
    }
    Ok(GradCheckReport { tensors, max_rel_err: overall, threshold: GRAD_CHECK_THRESHOLD })
}

/// Weight configurations for the verification suite: every term jointly,
/// then each in isolation.
pub fn gradient_check_weight_configs() -> Vec<(&'static str, LossWeights)> {
    let base = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, l2: 0.0, ..LossWeights::default() };
    vec![
        (
            "all-terms",
            LossWeights { lambda1: 0.05, lambda2: 0.05, lambda3: 0.05, l2: 1e-3, ..base.clone() },
        ),
        ("bpr-only", base.clone()),
        ("pairwise-only", LossWeights { lambda1: 0.1, ..base.clone() }),
        ("translation-only", LossWeights { lambda2: 0.1, ..base.clone() }),
        ("matching-only", LossWeights { lambda3: 0.1, ..base.clone() }),
        ("l2-only", LossWeights { l2: 0.01, ..base }),
    ]
}

/// Run `count` instances cycling through the weight configurations and both
/// degree modes. Returns one report per instance.
pub fn gradient_check_suite(count: usize, base_seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let configs = gradient_check_weight_configs();
    let mut reports = Vec::new();
    for i in 0..count {
        let (label, weights) = &configs[i % configs.len()];
        let opts = GradCheckOptions {
            seed: base_seed + i as u64 * 1000,
            weights: weights.clone(),
            degree_mode: if i % 2 == 0 { DegreeMode::Original } else { DegreeMode::Masked },
            ..GradCheckOptions::default()
        };
        reports.push((format!("{label}/seed{}", opts.seed), gradient_check(&opts)?));
    }
    Ok(reports)
}
