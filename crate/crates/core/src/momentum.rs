//! EMA teacher: momentum copies of both towers and the pseudo-label
//! similarity matrices for interaction-text matching.

use crate::corpus::{Batch, InteractionGraph};
use crate::encoders::{batch_stacks, ParameterSet, StackOptions};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::objectives::transpose;

/// Momentum copy of the full parameter set. The shadow never receives
/// optimizer gradients; it only moves through [`ema_update`].
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub shadow: ParameterSet,
    /// Momentum coefficient in [0, 1].
    pub beta: f64,
}

/// Deep-copy the student at step 0.
pub fn init_teacher(params: &ParameterSet, beta: f64) -> TeacherState {
    TeacherState { shadow: params.clone(), beta }
}

/// `theta_t <- beta * theta_t + (1 - beta) * theta_s`, elementwise over every
/// tensor.
pub fn ema_update(teacher: &mut TeacherState, student: &ParameterSet, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("EMA beta {beta} outside [0, 1]")));
    }
    let mut shadow = teacher.shadow.tensors_mut();
    for ((name, t), (_, s)) in shadow.iter_mut().zip(student.tensors().iter()) {
        if t.shape() != s.shape() {
            return Err(Error::Data(format!(
                "teacher tensor {name} has shape {:?}, student has {:?}",
                t.shape(),
                s.shape()
            )));
        }
        t.scale_add(beta, s, 1.0 - beta);
    }
    Ok(())
}

/// Run the full fusion forward with teacher weights over the batch entities
/// and return the raw text-to-interaction similarity matrix plus its
/// transpose: `(q_t2i, q_i2t)`. The outputs are plain values; nothing
/// downstream differentiates through them.
pub fn teacher_similarities(
    teacher: &TeacherState,
    graph: &InteractionGraph,
    semantic_user: &Mat,
    semantic_item: &Mat,
    batch: &Batch,
    opts: &StackOptions,
) -> Result<(Mat, Mat)> {
    let (intent_stack, text_stack) =
        batch_stacks(&teacher.shadow, graph, semantic_user, semantic_item, batch, opts)?;
    let q_t2i = text_stack.matmul_t(&intent_stack);
    let q_i2t = transpose(&q_t2i);
    Ok((q_t2i, q_i2t))
}
