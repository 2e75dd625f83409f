//! Hand-derived gradients of the multi-task objective. Correctness contract:
//! agreement with central finite differences (see the gradient-check suite).

use crate::corpus::{Batch, InteractionGraph};
use crate::encoders::{
    forward, gather_batch_stack, leaky_relu, leaky_relu_grad, sigmoid, variant_rows, DegreeMode,
    ForwardActivations, ForwardOptions, GraphVariant, ParameterSet, Scope, StackOptions,
    TextVariant,
};
use crate::error::{Error, Result};
use crate::mat::{axpy, dot, norm, Mat, ZERO_NORM_EPS};
use crate::objectives::{
    bpr_from_margins, ia_loss, itm_kl_terms, pairwise_loss, perturb_with, softmax_at, total_loss,
    translation_loss, transpose, LossWeights,
};

/// Everything a single loss/gradient evaluation depends on besides the
/// parameters. Noise draws and teacher similarities are fixed inputs, so the
/// loss is a deterministic function of `params` — exactly what the
/// finite-difference check requires.
pub struct LossContext<'a> {
    pub graph: &'a InteractionGraph,
    pub semantic_user: &'a Mat,
    pub semantic_item: &'a Mat,
    pub batch: &'a Batch,
    pub weights: &'a LossWeights,
    pub stack_opts: StackOptions<'a>,
    /// Compute refined intents for every node rather than batch-touched ones
    /// (identical math, more work).
    pub full_scope: bool,
    /// Multiplicative-noise draws for the translation loss, 3B×d.
    pub noise_intent: Option<&'a Mat>,
    pub noise_text: Option<&'a Mat>,
    /// Teacher raw text-to-interaction similarities, 3B×3B.
    pub teacher_t2i: Option<&'a Mat>,
}

/// Which loss terms are active under the current weights.
#[derive(Debug, Clone, Copy)]
pub struct TermGates {
    pub pairwise: bool,
    pub translation: bool,
    pub distill: bool,
}

impl TermGates {
    pub fn from_weights(w: &LossWeights) -> TermGates {
        let translation_in_itm =
            w.lambda3 > 0.0 && w.alpha_distill < 1.0 && !w.zero_itm_translation;
        TermGates {
            pairwise: w.lambda1 > 0.0,
            translation: w.lambda2 > 0.0 || translation_in_itm,
            distill: w.lambda3 > 0.0 && w.alpha_distill > 0.0,
        }
    }

    pub fn need_stacks(&self) -> bool {
        self.pairwise || self.translation || self.distill
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bpr: f64,
    pub ia: f64,
    pub itm: f64,
    pub pairwise: [f64; 3],
    pub translation: (f64, f64),
    pub kl: f64,
}

struct ForwardState {
    acts: ForwardActivations,
    margins: Vec<f64>,
    stacks: Option<Stacks>,
    breakdown: LossBreakdown,
}

struct Stacks {
    intent_stack: Mat,
    text_stack: Mat,
    noised_intent: Option<Mat>,
    noised_text: Option<Mat>,
    student_t2i: Option<Mat>,
}

fn run_forward(params: &ParameterSet, ctx: &LossContext) -> Result<ForwardState> {
    let w = ctx.weights;
    let gates = TermGates::from_weights(w);
    let scope = if ctx.full_scope { Scope::All } else { Scope::from_batch(ctx.batch) };
    let opts = ForwardOptions {
        layers: ctx.stack_opts.layers,
        degree_mode: ctx.stack_opts.degree_mode,
        scope,
        compute_intents: gates.need_stacks()
            && ctx.stack_opts.graph_variant == GraphVariant::Full,
        compute_text: gates.need_stacks() && ctx.stack_opts.text_variant == TextVariant::Tower,
    };
    let acts = forward(params, ctx.graph, ctx.semantic_user, ctx.semantic_item, &opts)?;

    let batch = ctx.batch;
    let margins: Vec<f64> = (0..batch.len())
        .map(|j| {
            let bu = acts.base_user.row(batch.users[j] as usize);
            let bp = acts.base_item.row(batch.pos_items[j] as usize);
            let bn = acts.base_item.row(batch.neg_items[j] as usize);
            dot(bu, bp) - dot(bu, bn)
        })
        .collect();
    let bpr = bpr_from_margins(&margins);

    let mut pairwise_terms = [0.0; 3];
    let mut translation_terms = (0.0, 0.0);
    let mut kl = 0.0;
    let mut stacks = None;

    if gates.need_stacks() {
        let (iu, ii, tu, ti) =
            variant_rows(params, &acts, ctx.semantic_user, ctx.semantic_item, &ctx.stack_opts)?;
        let intent_stack = gather_batch_stack(&iu, &ii, batch);
        let text_stack = gather_batch_stack(&tu, &ti, batch);
        let b = batch.len();

        if gates.pairwise {
            for g in 0..3 {
                let r_g = rows_slice(&intent_stack, g * b, b);
                let z_g = rows_slice(&text_stack, g * b, b);
                pairwise_terms[g] = pairwise_loss(&r_g, &z_g, w.tau)?;
            }
        }

        let (noised_intent, noised_text) = if gates.translation {
            let eps_r = ctx.noise_intent.ok_or_else(|| {
                Error::Numeric("translation loss active but no intent noise supplied".into())
            })?;
            let eps_z = ctx.noise_text.ok_or_else(|| {
                Error::Numeric("translation loss active but no text noise supplied".into())
            })?;
            let nr = perturb_with(&intent_stack, eps_r);
            let nz = perturb_with(&text_stack, eps_z);
            translation_terms = translation_loss(&nr, &nz, w.eta)?;
            (Some(nr), Some(nz))
        } else {
            (None, None)
        };

        let student_t2i = if gates.distill {
            let teacher = ctx.teacher_t2i.ok_or_else(|| {
                Error::Numeric("distillation active but no teacher similarities supplied".into())
            })?;
            let p = text_stack.matmul_t(&intent_stack);
            if p.shape() != teacher.shape() {
                return Err(Error::Data(format!(
                    "teacher similarity shape {:?} does not match student {:?}",
                    teacher.shape(),
                    p.shape()
                )));
            }
            kl = itm_kl_terms(teacher, &p, w.tau)?;
            Some(p)
        } else {
            None
        };

        stacks = Some(Stacks { intent_stack, text_stack, noised_intent, noised_text, student_t2i });
    }

    let ia = ia_loss(pairwise_terms, translation_terms, w);
    let itm = if w.lambda3 > 0.0 {
        let tran_share = if w.zero_itm_translation {
            0.0
        } else {
            translation_terms.0 + translation_terms.1
        };
        (1.0 - w.alpha_distill) * tran_share + w.alpha_distill * kl
    } else {
        0.0
    };
    let total = total_loss(bpr, ia, itm, w, params)?;
    let breakdown = LossBreakdown {
        total,
        bpr,
        ia,
        itm,
        pairwise: pairwise_terms,
        translation: translation_terms,
        kl,
    };
    Ok(ForwardState { acts, margins, stacks, breakdown })
}

/// Value of the multi-task objective under `ctx` (no gradients).
pub fn loss_value(params: &ParameterSet, ctx: &LossContext) -> Result<LossBreakdown> {
    Ok(run_forward(params, ctx)?.breakdown)
}

/// Exact gradients of the total loss with respect to every tensor, plus the
/// per-term loss values.
pub fn compute_gradients(
    params: &ParameterSet,
    ctx: &LossContext,
) -> Result<(ParameterSet, LossBreakdown)> {
    let state = run_forward(params, ctx)?;
    let w = ctx.weights;
    let gates = TermGates::from_weights(w);
    let graph = ctx.graph;
    let batch = ctx.batch;
    let b = batch.len();
    let d = params.embedding_dim();
    let layers = ctx.stack_opts.layers;

    let mut grads = ParameterSet::zeros_like(params);
    let mut g_base_user = Mat::zeros(graph.num_users(), d);
    let mut g_base_item = Mat::zeros(graph.num_items(), d);

    // base pairwise ranking loss
    for j in 0..b {
        let coeff = -sigmoid(-state.margins[j]) / b as f64;
        let u = batch.users[j] as usize;
        let p = batch.pos_items[j] as usize;
        let n = batch.neg_items[j] as usize;
        let bu = state.acts.base_user.row(u).to_vec();
        let diff: Vec<f64> = state
            .acts
            .base_item
            .row(p)
            .iter()
            .zip(state.acts.base_item.row(n))
            .map(|(x, y)| x - y)
            .collect();
        axpy(coeff, &diff, g_base_user.row_mut(u));
        axpy(coeff, &bu, g_base_item.row_mut(p));
        axpy(-coeff, &bu, g_base_item.row_mut(n));
    }

    // per-layer embedding gradients contributed by the attention towers
    let mut g_layer_user: Vec<Mat> = Vec::new();
    let mut g_layer_item: Vec<Mat> = Vec::new();

    if let Some(stacks) = &state.stacks {
        let a_rows = 3 * b;
        let mut g_intent_stack = Mat::zeros(a_rows, d);
        let mut g_text_stack = Mat::zeros(a_rows, d);

        if gates.pairwise {
            for g in 0..3 {
                let r_g = rows_slice(&stacks.intent_stack, g * b, b);
                let z_g = rows_slice(&stacks.text_stack, g * b, b);
                pairwise_backward(
                    &r_g,
                    &z_g,
                    w.tau,
                    w.lambda1,
                    g * b,
                    &mut g_intent_stack,
                    &mut g_text_stack,
                );
            }
        }

        if gates.translation {
            let weight_tr = w.lambda2
                + if w.zero_itm_translation { 0.0 } else { w.lambda3 * (1.0 - w.alpha_distill) };
            translation_backward(
                stacks.noised_intent.as_ref().unwrap(),
                stacks.noised_text.as_ref().unwrap(),
                ctx.noise_intent.unwrap(),
                ctx.noise_text.unwrap(),
                w.eta,
                weight_tr,
                &mut g_intent_stack,
                &mut g_text_stack,
            );
        }

        if gates.distill {
            distill_backward(
                stacks.student_t2i.as_ref().unwrap(),
                ctx.teacher_t2i.unwrap(),
                &stacks.intent_stack,
                &stacks.text_stack,
                w.tau,
                w.lambda3 * w.alpha_distill,
                &mut g_intent_stack,
                &mut g_text_stack,
            );
        }

        // scatter stack gradients back onto entity rows
        let mut g_intent_user = Mat::zeros(graph.num_users(), d);
        let mut g_intent_item = Mat::zeros(graph.num_items(), d);
        let mut g_text_user = Mat::zeros(graph.num_users(), d);
        let mut g_text_item = Mat::zeros(graph.num_items(), d);
        for j in 0..b {
            let u = batch.users[j] as usize;
            let p = batch.pos_items[j] as usize;
            let n = batch.neg_items[j] as usize;
            axpy(1.0, g_intent_stack.row(j), g_intent_user.row_mut(u));
            axpy(1.0, g_intent_stack.row(b + j), g_intent_item.row_mut(p));
            axpy(1.0, g_intent_stack.row(2 * b + j), g_intent_item.row_mut(n));
            axpy(1.0, g_text_stack.row(j), g_text_user.row_mut(u));
            axpy(1.0, g_text_stack.row(b + j), g_text_item.row_mut(p));
            axpy(1.0, g_text_stack.row(2 * b + j), g_text_item.row_mut(n));
        }

        match ctx.stack_opts.text_variant {
            TextVariant::Tower => {
                text_tower_backward(
                    ctx.semantic_user,
                    &state.acts.text_hidden_user,
                    &params.text_w2,
                    &g_text_user,
                    &state.acts.scoped_users,
                    &mut grads,
                );
                text_tower_backward(
                    ctx.semantic_item,
                    &state.acts.text_hidden_item,
                    &params.text_w2,
                    &g_text_item,
                    &state.acts.scoped_items,
                    &mut grads,
                );
            }
            TextVariant::FrozenProjection => {
                // frozen map over constant inputs: no parameter gradient
            }
        }

        match ctx.stack_opts.graph_variant {
            GraphVariant::Full => {
                let (gu, gi) = fusion_backward(
                    params,
                    graph,
                    &state.acts,
                    ctx.stack_opts.degree_mode,
                    layers,
                    &g_intent_user,
                    &g_intent_item,
                    &mut grads,
                );
                g_layer_user = gu;
                g_layer_item = gi;
            }
            GraphVariant::EmbeddingOnly => {
                grads.user_emb.scale_add(1.0, &g_intent_user, 1.0);
                grads.item_emb.scale_add(1.0, &g_intent_item, 1.0);
            }
        }
    }

    propagation_backward(
        graph,
        layers,
        &g_base_user,
        &g_base_item,
        &g_layer_user,
        &g_layer_item,
        &mut grads,
    );

    // l2 regularizer
    if w.l2 > 0.0 {
        let mut grad_tensors = grads.tensors_mut();
        for ((_, g), (_, p)) in grad_tensors.iter_mut().zip(params.tensors().iter()) {
            g.scale_add(1.0, p, 2.0 * w.l2);
        }
    }

    for (name, t) in grads.tensors() {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
        }
    }
    Ok((grads, state.breakdown))
}

/// Copy a contiguous row block into its own matrix.
fn rows_slice(m: &Mat, start: usize, len: usize) -> Mat {
    let mut out = Mat::zeros(len, m.cols());
    for r in 0..len {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

fn normalized_rows(m: &Mat) -> (Mat, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = vec![0.0; m.rows()];
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n > ZERO_NORM_EPS {
            norms[r] = n;
            for v in out.row_mut(r) {
                *v /= n;
            }
        } else {
            out.row_mut(r).fill(0.0);
        }
    }
    (out, norms)
}

/// InfoNCE-with-cosine backward for one sample group; `weight` is the loss
/// coefficient (lambda1), the 1/B and 1/tau factors are applied here.
fn pairwise_backward(
    r_g: &Mat,
    z_g: &Mat,
    tau: f64,
    weight: f64,
    row_offset: usize,
    g_intent_stack: &mut Mat,
    g_text_stack: &mut Mat,
) {
    let b = r_g.rows();
    let (r_hat, r_norms) = normalized_rows(r_g);
    let (z_hat, z_norms) = normalized_rows(z_g);
    let mut g_c = r_hat.matmul_t(&z_hat);
    for v in g_c.data_mut() {
        *v /= tau;
    }
    crate::mat::softmax_rows(&mut g_c);
    for i in 0..b {
        g_c.add_at(i, i, -1.0);
    }
    let scale = weight / (b as f64 * tau);
    for v in g_c.data_mut() {
        *v *= scale;
    }
    let g_r_hat = g_c.matmul(&z_hat);
    let g_z_hat = g_c.t_matmul(&r_hat);
    for i in 0..b {
        if r_norms[i] > 0.0 {
            let gh = g_r_hat.row(i);
            let rh = r_hat.row(i);
            let proj = dot(gh, rh);
            let out = g_intent_stack.row_mut(row_offset + i);
            for k in 0..gh.len() {
                out[k] += (gh[k] - proj * rh[k]) / r_norms[i];
            }
        }
        if z_norms[i] > 0.0 {
            let gh = g_z_hat.row(i);
            let zh = z_hat.row(i);
            let proj = dot(gh, zh);
            let out = g_text_stack.row_mut(row_offset + i);
            for k in 0..gh.len() {
                out[k] += (gh[k] - proj * zh[k]) / z_norms[i];
            }
        }
    }
}

/// Diagonal-target cross-entropy backward over `S = eta·R'Z'ᵀ`, both views.
#[allow(clippy::too_many_arguments)]
fn translation_backward(
    noised_r: &Mat,
    noised_z: &Mat,
    eps_r: &Mat,
    eps_z: &Mat,
    eta: f64,
    weight: f64,
    g_intent_stack: &mut Mat,
    g_text_stack: &mut Mat,
) {
    let a = noised_r.rows();
    let mut sims = noised_r.matmul_t(noised_z);
    for v in sims.data_mut() {
        *v *= eta;
    }
    let p_row = softmax_at(&sims, 1.0);
    let p_col = transpose(&softmax_at(&transpose(&sims), 1.0));
    let scale = weight / a as f64;
    let mut g_s = Mat::zeros(a, a);
    for r in 0..a {
        for c in 0..a {
            let delta = if r == c { 2.0 } else { 0.0 };
            g_s.set(r, c, scale * (p_row.get(r, c) + p_col.get(r, c) - delta));
        }
    }
    let g_nr = g_s.matmul(noised_z);
    let g_nz = g_s.t_matmul(noised_r);
    // r' = r ⊙ (1 + eps): the noise is a constant factor on the way back
    for r in 0..a {
        for c in 0..g_nr.cols() {
            g_intent_stack.add_at(r, c, eta * g_nr.get(r, c) * (1.0 + eps_r.get(r, c)));
            g_text_stack.add_at(r, c, eta * g_nz.get(r, c) * (1.0 + eps_z.get(r, c)));
        }
    }
}

/// KL(q ‖ softmax(S/tau)) backward in both directions over the raw student
/// similarities `S = Z·Rᵀ`. The teacher is a constant.
#[allow(clippy::too_many_arguments)]
fn distill_backward(
    student_t2i: &Mat,
    teacher_t2i: &Mat,
    intent_stack: &Mat,
    text_stack: &Mat,
    tau: f64,
    weight: f64,
    g_intent_stack: &mut Mat,
    g_text_stack: &mut Mat,
) {
    let a = student_t2i.rows();
    let p_t2i = softmax_at(student_t2i, tau);
    let q_t2i = softmax_at(teacher_t2i, tau);
    let p_i2t = softmax_at(&transpose(student_t2i), tau);
    let q_i2t = softmax_at(&transpose(teacher_t2i), tau);
    let scale = weight / (tau * a as f64);
    let mut g_p = Mat::zeros(a, a);
    for r in 0..a {
        for c in 0..a {
            let t2i = p_t2i.get(r, c) - q_t2i.get(r, c);
            let i2t = p_i2t.get(c, r) - q_i2t.get(c, r);
            g_p.set(r, c, scale * (t2i + i2t));
        }
    }
    // S[a][b] = dot(z_a, r_b)
    g_text_stack.scale_add(1.0, &g_p.matmul(intent_stack), 1.0);
    g_intent_stack.scale_add(1.0, &g_p.t_matmul(text_stack), 1.0);
}

/// MLP backward for one text-tower side, restricted to the rows the forward
/// pass computed.
fn text_tower_backward(
    semantic: &Mat,
    hidden_pre: &Mat,
    w2: &Mat,
    g_z: &Mat,
    rows: &[u32],
    grads: &mut ParameterSet,
) {
    let h = w2.rows();
    let mut g_pre = vec![0.0; h];
    for &r in rows {
        let r = r as usize;
        let gz = g_z.row(r);
        if gz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let pre = hidden_pre.row(r);
        for k in 0..h {
            let act = leaky_relu(pre[k]);
            if act != 0.0 {
                axpy(act, gz, grads.text_w2.row_mut(k));
            }
            g_pre[k] = dot(gz, w2.row(k)) * leaky_relu_grad(pre[k]);
        }
        axpy(1.0, gz, grads.text_b2.row_mut(0));
        let x = semantic.row(r);
        for (i, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, &g_pre, grads.text_w1.row_mut(i));
            }
        }
        axpy(1.0, &g_pre, grads.text_b1.row_mut(0));
    }
}

/// Backward through refinement means, GSL masks, and prototype attention.
/// Pushes prototype gradients into `grads` and returns the per-layer
/// propagated-embedding gradients (layers 1..=L) for the propagation chain.
#[allow(clippy::too_many_arguments)]
fn fusion_backward(
    params: &ParameterSet,
    graph: &InteractionGraph,
    acts: &ForwardActivations,
    degree_mode: DegreeMode,
    layers: usize,
    g_intent_user: &Mat,
    g_intent_item: &Mat,
    grads: &mut ParameterSet,
) -> (Vec<Mat>, Vec<Mat>) {
    let d = params.embedding_dim();
    let mut g_layer_user: Vec<Mat> =
        (0..layers).map(|_| Mat::zeros(graph.num_users(), d)).collect();
    let mut g_layer_item: Vec<Mat> =
        (0..layers).map(|_| Mat::zeros(graph.num_items(), d)).collect();

    for l in 0..layers {
        let mask = &acts.masks[l];
        let raw_u = &acts.raw_user[l];
        let raw_i = &acts.raw_item[l];
        let inv_l = 1.0 / layers as f64;

        let mut g_raw_u = Mat::zeros(graph.num_users(), d);
        let mut g_raw_i = Mat::zeros(graph.num_items(), d);
        let mut gm_user = vec![0.0; graph.num_edges()];
        let mut gm_item = vec![0.0; graph.num_edges()];

        // refined rows are masked neighbor sums; the mean adds a 1/L factor
        for &u in &acts.scoped_users {
            let u = u as usize;
            let gout: Vec<f64> = g_intent_user.row(u).iter().map(|v| v * inv_l).collect();
            if gout.iter().all(|&v| v == 0.0) {
                continue;
            }
            for &(i, eid) in graph.user_neighbors(u) {
                let m = mask.user_mask(eid, u);
                if m != 0.0 {
                    axpy(m, &gout, g_raw_i.row_mut(i as usize));
                }
                gm_user[eid as usize] = dot(&gout, raw_i.row(i as usize));
            }
        }
        for &i in &acts.scoped_items {
            let i = i as usize;
            let gout: Vec<f64> = g_intent_item.row(i).iter().map(|v| v * inv_l).collect();
            if gout.iter().all(|&v| v == 0.0) {
                continue;
            }
            for &(u, eid) in graph.item_neighbors(i) {
                let m = mask.item_mask(eid, i);
                if m != 0.0 {
                    axpy(m, &gout, g_raw_u.row_mut(u as usize));
                }
                gm_item[eid as usize] = dot(&gout, raw_u.row(u as usize));
            }
        }

        // mask -> alpha
        let mut g_alpha = vec![0.0; graph.num_edges()];
        match degree_mode {
            DegreeMode::Original => {
                for &eid in &mask.edge_ids {
                    let (u, i) = graph.edges()[eid as usize];
                    let gu = gm_user[eid as usize] / graph.user_degree(u as usize) as f64;
                    let gi = gm_item[eid as usize] / graph.item_degree(i as usize) as f64;
                    g_alpha[eid as usize] = gu + gi;
                }
            }
            DegreeMode::Masked => {
                // d(alpha_e / S_u)/d(alpha_f) = delta_ef/S_u - alpha_e/S_u^2
                for &u in &acts.scoped_users {
                    let u = u as usize;
                    let s = mask.user_norm[u];
                    if s <= 0.0 {
                        continue;
                    }
                    let t: f64 = graph
                        .user_neighbors(u)
                        .iter()
                        .map(|&(_, eid)| gm_user[eid as usize] * mask.alpha[eid as usize])
                        .sum();
                    for &(_, eid) in graph.user_neighbors(u) {
                        g_alpha[eid as usize] += gm_user[eid as usize] / s - t / (s * s);
                    }
                }
                for &i in &acts.scoped_items {
                    let i = i as usize;
                    let s = mask.item_norm[i];
                    if s <= 0.0 {
                        continue;
                    }
                    let t: f64 = graph
                        .item_neighbors(i)
                        .iter()
                        .map(|&(_, eid)| gm_item[eid as usize] * mask.alpha[eid as usize])
                        .sum();
                    for &(_, eid) in graph.item_neighbors(i) {
                        g_alpha[eid as usize] += gm_item[eid as usize] / s - t / (s * s);
                    }
                }
            }
        }

        // alpha = (cos + 1)/2; cosine backward with the zero-norm convention
        for &eid in &mask.edge_ids {
            let ga = g_alpha[eid as usize];
            if ga == 0.0 {
                continue;
            }
            let gc = ga * 0.5;
            let (u, i) = graph.edges()[eid as usize];
            let a = raw_u.row(u as usize);
            let bb = raw_i.row(i as usize);
            let na = norm(a);
            let nb = norm(bb);
            if na <= ZERO_NORM_EPS || nb <= ZERO_NORM_EPS {
                continue;
            }
            let c = dot(a, bb) / (na * nb);
            let gu_row = g_raw_u.row_mut(u as usize);
            for k in 0..d {
                gu_row[k] += gc * (bb[k] / (na * nb) - c * a[k] / (na * na));
            }
            let gi_row = g_raw_i.row_mut(i as usize);
            for k in 0..d {
                gi_row[k] += gc * (a[k] / (na * nb) - c * bb[k] / (nb * nb));
            }
        }

        attention_backward(
            &acts.user_layers[l + 1],
            &acts.attn_user[l],
            &params.user_prototypes,
            &g_raw_u,
            &mut grads.user_prototypes,
            &mut g_layer_user[l],
        );
        attention_backward(
            &acts.item_layers[l + 1],
            &acts.attn_item[l],
            &params.item_prototypes,
            &g_raw_i,
            &mut grads.item_prototypes,
            &mut g_layer_item[l],
        );
    }
    (g_layer_user, g_layer_item)
}

fn attention_backward(
    e_layer: &Mat,
    attn: &Mat,
    prototypes: &Mat,
    g_raw: &Mat,
    g_proto: &mut Mat,
    g_e_layer: &mut Mat,
) {
    // r = P·C  =>  gC += Pᵀ·g_r, gP = g_r·Cᵀ
    g_proto.scale_add(1.0, &attn.t_matmul(g_raw), 1.0);
    let g_p = g_raw.matmul_t(prototypes);
    let k = prototypes.rows();
    let mut g_logits = Mat::zeros(attn.rows(), k);
    for row in 0..attn.rows() {
        let gp = g_p.row(row);
        if gp.iter().all(|&v| v == 0.0) {
            continue;
        }
        let p = attn.row(row);
        let s = dot(gp, p);
        let out = g_logits.row_mut(row);
        for j in 0..k {
            out[j] = p[j] * (gp[j] - s);
        }
    }
    // logits = e·Cᵀ  =>  g_e += g_logits·C, gC += g_logitsᵀ·e
    g_e_layer.scale_add(1.0, &g_logits.matmul(prototypes), 1.0);
    g_proto.scale_add(1.0, &g_logits.t_matmul(e_layer), 1.0);
}

/// Reverse pass of the LightGCN propagation. The base-mean gradient lands on
/// every layer with weight 1/(L+1); attention gradients land on layers
/// 1..=L; everything is then walked back through the adjacency to the
/// embedding tables.
fn propagation_backward(
    graph: &InteractionGraph,
    layers: usize,
    g_base_user: &Mat,
    g_base_item: &Mat,
    g_layer_user: &[Mat],
    g_layer_item: &[Mat],
    grads: &mut ParameterSet,
) {
    let d = g_base_user.cols();
    let w_base = 1.0 / (layers + 1) as f64;
    let mut ge_u: Vec<Mat> = (0..=layers).map(|_| Mat::zeros(graph.num_users(), d)).collect();
    let mut ge_i: Vec<Mat> = (0..=layers).map(|_| Mat::zeros(graph.num_items(), d)).collect();
    for l in 0..=layers {
        ge_u[l].scale_add(1.0, g_base_user, w_base);
        ge_i[l].scale_add(1.0, g_base_item, w_base);
    }
    for (l, (gu, gi)) in g_layer_user.iter().zip(g_layer_item).enumerate() {
        ge_u[l + 1].scale_add(1.0, gu, 1.0);
        ge_i[l + 1].scale_add(1.0, gi, 1.0);
    }
    for l in (1..=layers).rev() {
        let (head_u, tail_u) = ge_u.split_at_mut(l);
        let (head_i, tail_i) = ge_i.split_at_mut(l);
        let gu_l = &tail_u[0];
        let gi_l = &tail_i[0];
        let gu_prev = &mut head_u[l - 1];
        let gi_prev = &mut head_i[l - 1];
        for &(u, i) in graph.edges() {
            let w = graph.norm_weight(u as usize, i as usize);
            axpy(w, gu_l.row(u as usize), gi_prev.row_mut(i as usize));
            axpy(w, gi_l.row(i as usize), gu_prev.row_mut(u as usize));
        }
    }
    grads.user_emb.scale_add(1.0, &ge_u[0], 1.0);
    grads.item_emb.scale_add(1.0, &ge_i[0], 1.0);
}
