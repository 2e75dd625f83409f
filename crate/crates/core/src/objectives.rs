//! Loss terms: base BPR, pairwise InfoNCE alignment, noise-perturbed
//! translation alignment, the combined alignment objective, momentum-distilled
//! interaction-text matching, and the multi-task total.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::Batch;
use crate::encoders::{ForwardActivations, ParameterSet};
use crate::error::{Error, Result};
use crate::mat::{dot, log_sum_exp, softmax_rows, Mat, ZERO_NORM_EPS};

/// Loss weights and temperatures. `alpha_distill` balances the distillation
/// target against the translation term inside the matching loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub eta: f64,
    pub alpha_distill: f64,
    pub l2: f64,
    /// Ablation switch: drop the translation share inside the matching loss
    /// (it otherwise enters both the alignment and matching objectives).
    pub zero_itm_translation: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.02,
            lambda2: 0.01,
            lambda3: 0.01,
            tau: 0.2,
            eta: 5.0,
            alpha_distill: 0.4,
            l2: 1e-4,
            zero_itm_translation: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_distill) {
            return Err(Error::Config("alpha_distill must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean pairwise ranking loss `-log sigma(score(u,pos) - score(u,neg))` over
/// the batch, scored on the layer-mean base embeddings.
pub fn bpr_loss(activations: &ForwardActivations, batch: &Batch) -> f64 {
    let margins: Vec<f64> = (0..batch.len())
        .map(|j| {
            let bu = activations.base_user.row(batch.users[j] as usize);
            let bp = activations.base_item.row(batch.pos_items[j] as usize);
            let bn = activations.base_item.row(batch.neg_items[j] as usize);
            dot(bu, bp) - dot(bu, bn)
        })
        .collect();
    bpr_from_margins(&margins)
}

/// `mean(softplus(-margin))`, numerically stable.
pub fn bpr_from_margins(margins: &[f64]) -> f64 {
    let total: f64 = margins.iter().map(|&x| softplus(-x)).sum();
    total / margins.len() as f64
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per-row InfoNCE terms with cosine similarity at temperature `tau`:
/// positives on the diagonal, in-batch cross-modal negatives.
pub fn pairwise_row_terms(intent_rows: &Mat, text_rows: &Mat, tau: f64) -> Result<Vec<f64>> {
    if intent_rows.rows() == 0 {
        return Err(Error::Data("pairwise loss over an empty batch".into()));
    }
    if intent_rows.rows() != text_rows.rows() {
        return Err(Error::Data("pairwise loss row counts differ".into()));
    }
    let sims = cosine_matrix(intent_rows, text_rows);
    let mut terms = Vec::with_capacity(sims.rows());
    for r in 0..sims.rows() {
        let scaled: Vec<f64> = sims.row(r).iter().map(|v| v / tau).collect();
        terms.push(log_sum_exp(&scaled) - scaled[r]);
    }
    Ok(terms)
}

/// Mean of [`pairwise_row_terms`].
pub fn pairwise_loss(intent_rows: &Mat, text_rows: &Mat, tau: f64) -> Result<f64> {
    let terms = pairwise_row_terms(intent_rows, text_rows, tau)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Full cosine-similarity matrix between the rows of `a` and of `b`.
/// Zero-norm rows yield similarity 0.
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Mat {
    let an = crate::encoders::row_norms(a);
    let bn = crate::encoders::row_norms(b);
    let mut out = a.matmul_t(b);
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let denom = an[r] * bn[c];
            let v = if denom > ZERO_NORM_EPS * ZERO_NORM_EPS { out.get(r, c) / denom } else { 0.0 };
            out.set(r, c, v);
        }
    }
    out
}

/// Multiplicative Gaussian perturbation `r' = r + eps ⊙ r`. Returns the
/// noised rows and the drawn noise; callers treat the noise as a constant
/// when differentiating.
pub fn perturb(rows: &Mat, rng: &mut impl Rng) -> (Mat, Mat) {
    let eps = Mat::from_fn(rows.rows(), rows.cols(), |_, _| rng.sample(StandardNormal));
    (perturb_with(rows, &eps), eps)
}

/// Apply a fixed noise draw.
pub fn perturb_with(rows: &Mat, eps: &Mat) -> Mat {
    assert_eq!(rows.shape(), eps.shape());
    let mut out = rows.clone();
    for (o, (&r, &e)) in out.data_mut().iter_mut().zip(rows.data().iter().zip(eps.data())) {
        *o = r + e * r;
    }
    out
}

/// Diagonal-target cross-entropy over the scaled similarity matrix
/// `S = eta · r'·z'ᵀ`, in the text direction (rows of S) and the interaction
/// direction (rows of Sᵀ). Returns (text view, interaction view).
pub fn translation_loss(noised_r: &Mat, noised_z: &Mat, eta: f64) -> Result<(f64, f64)> {
    if noised_r.rows() == 0 {
        return Err(Error::Data("translation loss over an empty batch".into()));
    }
    if noised_r.rows() != noised_z.rows() {
        return Err(Error::Data("translation loss row counts differ".into()));
    }
    let mut sims = noised_r.matmul_t(noised_z);
    for v in sims.data_mut() {
        *v *= eta;
    }
    let n = sims.rows();
    let mut text_view = 0.0;
    let mut inter_view = 0.0;
    for r in 0..n {
        text_view += log_sum_exp(sims.row(r)) - sims.get(r, r);
        let col: Vec<f64> = (0..n).map(|j| sims.get(j, r)).collect();
        inter_view += log_sum_exp(&col) - sims.get(r, r);
    }
    Ok((text_view / n as f64, inter_view / n as f64))
}

/// Combined alignment objective:
/// `lambda1 · (pair_user + pair_pos + pair_neg) + lambda2 · (tran_text + tran_inter)`.
pub fn ia_loss(pairwise_terms: [f64; 3], translation_terms: (f64, f64), weights: &LossWeights) -> f64 {
    weights.lambda1 * (pairwise_terms[0] + pairwise_terms[1] + pairwise_terms[2])
        + weights.lambda2 * (translation_terms.0 + translation_terms.1)
}

/// Momentum-distilled matching loss. `student_sims`/`teacher_sims` are raw
/// text-to-interaction dot-product matrices over the same rows; both
/// directions are row-softmaxed at temperature `tau` before the KL terms.
/// Teacher values carry no gradient.
pub fn itm_loss(
    student_sims: &Mat,
    teacher_sims: &Mat,
    translation_terms: (f64, f64),
    alpha_distill: f64,
    tau: f64,
    zero_translation_share: bool,
) -> Result<f64> {
    if student_sims.shape() != teacher_sims.shape() {
        return Err(Error::Data(format!(
            "matching loss shape mismatch: student {:?} vs teacher {:?}",
            student_sims.shape(),
            teacher_sims.shape()
        )));
    }
    let tran = if zero_translation_share {
        0.0
    } else {
        translation_terms.0 + translation_terms.1
    };
    let kl = kl_row_mean(teacher_sims, student_sims, tau)?
        + kl_row_mean(&transpose(teacher_sims), &transpose(student_sims), tau)?;
    Ok((1.0 - alpha_distill) * tran + alpha_distill * kl)
}

/// The distillation component of the matching loss on its own:
/// `KL(q_t2i ‖ p_t2i) + KL(q_i2t ‖ p_i2t)` over raw similarity matrices.
pub fn itm_kl_terms(teacher_raw: &Mat, student_raw: &Mat, tau: f64) -> Result<f64> {
    if teacher_raw.shape() != student_raw.shape() {
        return Err(Error::Data("KL term shape mismatch".into()));
    }
    Ok(kl_row_mean(teacher_raw, student_raw, tau)?
        + kl_row_mean(&transpose(teacher_raw), &transpose(student_raw), tau)?)
}

/// Mean over rows of `KL(softmax(q_row/tau) || softmax(p_row/tau))`.
fn kl_row_mean(q_raw: &Mat, p_raw: &Mat, tau: f64) -> Result<f64> {
    let q = softmax_at(q_raw, tau);
    let p = softmax_at(p_raw, tau);
    let mut total = 0.0;
    for r in 0..q.rows() {
        for (qv, pv) in q.row(r).iter().zip(p.row(r)) {
            if *qv > 0.0 {
                total += qv * (qv.ln() - pv.ln());
            }
        }
    }
    let v = total / q.rows() as f64;
    if !v.is_finite() {
        return Err(Error::Numeric("KL divergence is non-finite".into()));
    }
    Ok(v)
}

pub(crate) fn softmax_at(raw: &Mat, tau: f64) -> Mat {
    let mut m = raw.clone();
    for v in m.data_mut() {
        *v /= tau;
    }
    softmax_rows(&mut m);
    m
}

pub(crate) fn transpose(m: &Mat) -> Mat {
    Mat::from_fn(m.cols(), m.rows(), |r, c| m.get(c, r))
}

/// Multi-task total: `bpr + ia + lambda3 · itm + l2 · ||Theta||^2`.
pub fn total_loss(
    bpr: f64,
    ia: f64,
    itm: f64,
    weights: &LossWeights,
    params: &ParameterSet,
) -> Result<f64> {
    let total = bpr + ia + weights.lambda3 * itm + weights.l2 * params.squared_norm();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "total loss is non-finite (bpr={bpr}, ia={ia}, itm={itm})"
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = stream_rng(seed, Stream::Synth);
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bpr_equal_scores_is_ln2() {
        let loss = bpr_from_margins(&[0.0, 0.0, 0.0]);
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bpr_margin_ln3() {
        let loss = bpr_from_margins(&[3.0f64.ln()]);
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
        assert!((loss - 0.2876820724).abs() < 1e-9);
    }

    #[test]
    fn bpr_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for i in 0..30 {
            let l = bpr_from_margins(&[i as f64 * 0.5 - 5.0]);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn pairwise_batch_of_one_is_zero() {
        let r = rand_mat(1, 4, 1);
        let loss = pairwise_loss(&r, &r.clone(), 0.2).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn pairwise_two_rows_closed_form() {
        // s(r1,z1)=1, s(r1,z2)=0, tau=1 -> row-1 term = ln(1 + e^-1)
        let r = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let z = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]);
        let terms = pairwise_row_terms(&r, &z, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((terms[0] - expect).abs() < 1e-12, "{} vs {expect}", terms[0]);
        assert!((terms[0] - 0.3132616875).abs() < 1e-9);
    }

    #[test]
    fn pairwise_empty_batch_errors() {
        let r = Mat::zeros(0, 3);
        assert!(pairwise_loss(&r, &r.clone(), 0.2).is_err());
    }

    #[test]
    fn perturb_zero_rows_stay_zero() {
        let r = Mat::zeros(3, 4);
        let mut rng = stream_rng(2, Stream::Noise);
        let (noised, _) = perturb(&r, &mut rng);
        assert!(noised.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturb_monte_carlo_moments() {
        // r' = r(1 + eps): mean r, std |r| per coordinate
        let r = Mat::from_vec(1, 2, vec![2.0, -0.5]);
        let mut rng = stream_rng(3, Stream::Noise);
        let draws = 100_000usize;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..draws {
            let (noised, _) = perturb(&r, &mut rng);
            for c in 0..2 {
                sum[c] += noised.get(0, c);
                sum_sq[c] += noised.get(0, c).powi(2);
            }
        }
        for c in 0..2 {
            let mean = sum[c] / draws as f64;
            let var = sum_sq[c] / draws as f64 - mean * mean;
            let r_c = r.get(0, c);
            // 3 standard errors of the mean: 3·|r|/sqrt(n)
            let se = 3.0 * r_c.abs() / (draws as f64).sqrt();
            assert!((mean - r_c).abs() < se, "mean {mean} vs {r_c}");
            // std of r'/|r| ~ 1 within 3 standard errors (se of std ≈ 1/sqrt(2n))
            let std_ratio = var.sqrt() / r_c.abs();
            assert!((std_ratio - 1.0).abs() < 3.0 / (2.0 * draws as f64).sqrt() * 2.0);
        }
    }

    #[test]
    fn translation_batch_of_one_is_zero() {
        let r = rand_mat(1, 3, 4);
        let z = rand_mat(1, 3, 5);
        let (t, i) = translation_loss(&r, &z, 5.0).unwrap();
        assert!(t.abs() < 1e-12 && i.abs() < 1e-12);
    }

    #[test]
    fn translation_eta_zero_is_ln_batch() {
        let r = rand_mat(4, 3, 6);
        let z = rand_mat(4, 3, 7);
        let (t, i) = translation_loss(&r, &z, 0.0).unwrap();
        assert!((t - 4.0f64.ln()).abs() < 1e-12);
        assert!((i - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn translation_matches_brute_force_softmax() {
        let r = rand_mat(3, 4, 8);
        let z = rand_mat(3, 4, 9);
        let eta = 2.5;
        let (t, i) = translation_loss(&r, &z, eta).unwrap();

        let mut t_oracle = 0.0;
        let mut i_oracle = 0.0;
        for a in 0..3 {
            let row: Vec<f64> = (0..3).map(|b| eta * dot(r.row(a), z.row(b))).collect();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            t_oracle += -(row[a].exp() / denom).ln();
            let col: Vec<f64> = (0..3).map(|b| eta * dot(r.row(b), z.row(a))).collect();
            let denom: f64 = col.iter().map(|v| v.exp()).sum();
            i_oracle += -(col[a].exp() / denom).ln();
        }
        assert!((t - t_oracle / 3.0).abs() <= 1e-6);
        assert!((i - i_oracle / 3.0).abs() <= 1e-6);
    }

    #[test]
    fn ia_loss_combinations() {
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        assert_eq!(ia_loss([1.0, 2.0, 3.0], (4.0, 5.0), &w), 0.0);
        let w = LossWeights { lambda1: 1.0, lambda2: 0.0, ..Default::default() };
        assert!((ia_loss([0.7, 0.7, 0.7], (4.0, 5.0), &w) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn default_lambda1_in_paper_band() {
        let w = LossWeights::default();
        assert!(w.lambda1 >= 0.01 && w.lambda1 <= 0.03);
        assert!((w.alpha_distill - 0.4).abs() < 1e-12);
    }

    #[test]
    fn itm_alpha_zero_is_translation() {
        let p = rand_mat(3, 3, 10);
        let q = rand_mat(3, 3, 11);
        let loss = itm_loss(&p, &q, (0.8, 0.6), 0.0, 0.2, false).unwrap();
        assert!((loss - 1.4).abs() < 1e-12);
    }

    #[test]
    fn itm_teacher_equals_student_leaves_translation_share() {
        let p = rand_mat(3, 3, 12);
        let loss = itm_loss(&p, &p.clone(), (0.8, 0.6), 0.4, 0.2, false).unwrap();
        assert!((loss - 0.6 * 1.4).abs() < 1e-12);
        let zeroed = itm_loss(&p, &p.clone(), (0.8, 0.6), 0.4, 0.2, true).unwrap();
        assert!(zeroed.abs() < 1e-12);
    }

    #[test]
    fn itm_shape_mismatch_errors() {
        let p = rand_mat(3, 3, 13);
        let q = rand_mat(2, 2, 14);
        assert!(itm_loss(&p, &q, (0.0, 0.0), 0.4, 0.2, false).is_err());
    }

    #[test]
    fn itm_matches_kl_hand_oracle() {
        let p = Mat::from_vec(2, 2, vec![0.3, -0.2, 0.1, 0.5]);
        let q = Mat::from_vec(2, 2, vec![-0.1, 0.4, 0.2, 0.0]);
        let tau = 0.2;
        let alpha = 0.4;
        let loss = itm_loss(&p, &q, (0.0, 0.0), alpha, tau, false).unwrap();

        // hand oracle: explicit softmax + sum q ln(q/p) in both directions
        let soft = |a: f64, b: f64| {
            let ea = (a / tau).exp();
            let eb = (b / tau).exp();
            (ea / (ea + eb), eb / (ea + eb))
        };
        let mut kl = 0.0;
        // rows (t2i)
        for r in 0..2 {
            let (q1, q2) = soft(q.get(r, 0), q.get(r, 1));
            let (p1, p2) = soft(p.get(r, 0), p.get(r, 1));
            kl += q1 * (q1 / p1).ln() + q2 * (q2 / p2).ln();
        }
        // columns (i2t)
        for c in 0..2 {
            let (q1, q2) = soft(q.get(0, c), q.get(1, c));
            let (p1, p2) = soft(p.get(0, c), p.get(1, c));
            kl += q1 * (q1 / p1).ln() + q2 * (q2 / p2).ln();
        }
        let expect = alpha * kl / 2.0;
        assert!((loss - expect).abs() <= 1e-8, "{loss} vs {expect}");
    }

    #[test]
    fn total_loss_reduces_and_sums() {
        let params = ParameterSet::zeros(2, 2, 2, 1, 2, 2);
        let w = LossWeights { lambda3: 0.0, l2: 0.0, ..Default::default() };
        let t = total_loss(1.5, 0.25, 9.0, &w, &params).unwrap();
        assert!((t - 1.75).abs() < 1e-12);

        let w = LossWeights { lambda3: 0.5, l2: 0.1, ..Default::default() };
        let t = total_loss(1.0, 0.5, 2.0, &w, &params).unwrap();
        assert!((t - (1.0 + 0.5 + 1.0 + 0.0)).abs() < 1e-12); // zero params -> reg 0
    }

    #[test]
    fn total_loss_component_sum_oracle() {
        let mut params = ParameterSet::zeros(2, 2, 2, 1, 2, 2);
        params.user_emb.set(0, 0, 0.5);
        params.text_w2.set(1, 1, -1.5);
        let w = LossWeights { lambda1: 0.3, lambda2: 0.7, lambda3: 0.2, l2: 0.01, ..Default::default() };
        let pair = [0.4, 0.5, 0.6];
        let tran = (0.8, 0.9);
        let ia = ia_loss(pair, tran, &w);
        let itm = 1.25;
        let bpr = 0.69;
        let t = total_loss(bpr, ia, itm, &w, &params).unwrap();
        let expect = bpr
            + 0.3 * (0.4 + 0.5 + 0.6)
            + 0.7 * (0.8 + 0.9)
            + 0.2 * 1.25
            + 0.01 * (0.25 + 2.25);
        assert!((t - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let params = ParameterSet::zeros(1, 1, 1, 1, 1, 1);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &LossWeights::default(), &params).is_err());
    }

    proptest! {
        #[test]
        fn pairwise_nonnegative_and_scale_invariant(seed in 0u64..200, scale in 0.1f64..10.0) {
            let r = rand_mat(4, 3, seed);
            let z = rand_mat(4, 3, seed + 1000);
            let base = pairwise_loss(&r, &z, 0.2).unwrap();
            prop_assert!(base >= -1e-12);
            let mut z_scaled = z.clone();
            for v in z_scaled.data_mut() {
                *v *= scale;
            }
            let scaled = pairwise_loss(&r, &z_scaled, 0.2).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn translation_views_nonnegative(seed in 0u64..200) {
            let r = rand_mat(5, 3, seed);
            let z = rand_mat(5, 3, seed + 500);
            let (t, i) = translation_loss(&r, &z, 3.0).unwrap();
            prop_assert!(t >= -1e-12);
            prop_assert!(i >= -1e-12);
        }

        #[test]
        fn kl_terms_nonnegative(seed in 0u64..200) {
            let p = rand_mat(4, 4, seed);
            let q = rand_mat(4, 4, seed + 250);
            let loss = itm_loss(&p, &q, (0.0, 0.0), 1.0, 0.2, false).unwrap();
            prop_assert!(loss >= -1e-12);
        }
    }
}
