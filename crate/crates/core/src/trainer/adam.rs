//! Adam with bias correction over the uniform tensor set.

use crate::encoders::ParameterSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: ParameterSet,
    pub second_moment: ParameterSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(like: &ParameterSet) -> Self {
        OptimizerState {
            first_moment: ParameterSet::zeros_like(like),
            second_moment: ParameterSet::zeros_like(like),
            step: 0,
        }
    }
}

/// One Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut p_tensors = params.tensors_mut();
    let mut m_tensors = state.first_moment.tensors_mut();
    let mut v_tensors = state.second_moment.tensors_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in p_tensors
        .iter_mut()
        .zip(m_tensors.iter_mut())
        .zip(v_tensors.iter_mut().zip(grads.tensors().iter()))
    {
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for idx in 0..pd.len() {
            let grad = gd[idx];
            md[idx] = ADAM_BETA1 * md[idx] + (1.0 - ADAM_BETA1) * grad;
            vd[idx] = ADAM_BETA2 * vd[idx] + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = md[idx] / bc1;
            let v_hat = vd[idx] / bc2;
            pd[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParameterSet {
        let mut p = ParameterSet::zeros(2, 2, 2, 1, 2, 2);
        p.user_emb.set(0, 0, 1.0);
        p.item_emb.set(1, 1, -2.0);
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        let grads = ParameterSet::zeros_like(&p);
        let mut state = OptimizerState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut state, 1e-3);
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_magnitude_close_to_lr() {
        // constant gradient g: m_hat = g, v_hat = g^2,
        // update = lr * g / (|g| + eps) ~= lr * sign(g)
        let mut p = tiny();
        let before = p.clone();
        let mut grads = ParameterSet::zeros_like(&p);
        for (_, t) in grads.tensors_mut() {
            t.fill(0.37);
        }
        let mut state = OptimizerState::new(&p);
        let lr = 1e-3;
        adam_step(&mut p, &grads, &mut state, lr);
        for ((_, after), (_, prior)) in p.tensors().iter().zip(before.tensors().iter()) {
            for (a, b) in after.data().iter().zip(prior.data()) {
                let update = (a - b).abs();
                assert!(update <= lr && update >= 0.99 * lr, "update {update}");
                assert!(a < b); // positive gradient decreases the parameter
            }
        }
    }

    #[test]
    fn shapes_and_finiteness_preserved() {
        let mut p = tiny();
        let mut grads = ParameterSet::zeros_like(&p);
        grads.text_w1.fill(123.0);
        grads.user_prototypes.fill(-55.5);
        let mut state = OptimizerState::new(&p);
        for _ in 0..50 {
            adam_step(&mut p, &grads, &mut state, 0.01);
            assert!(p.is_finite());
        }
        assert_eq!(p.text_w1.shape(), (2, 2));
    }
}
