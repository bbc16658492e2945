use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let k = match logits.shape() {
        [_, k] => *k,
        s => return Err(Error::shape(format!("logits must be rank 2, got {s:?}"))),
    };
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect())
}

/// Mean smoothed cross-entropy of `logits (B, K)` against `labels`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let z = g.constant(logits.clone());
    let l = g.cross_entropy(z, labels, smoothing, labels.len().max(1))?;
    Ok(g.value(l).data()[0].f64())
}

/// Inputs of the hard-distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct DistillLossInput<'a, T> {
    pub student_logits: &'a Tensor<T>,
    pub teacher_logits: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub alpha: f64,
}

/// `α·CE(Z_s, y) + (1 − α)·CE(Z_s, argmax Z_t)`.
pub fn distilled_loss<T: Scalar>(input: &DistillLossInput<'_, T>) -> Result<f64> {
    if input.student_logits.shape() != input.teacher_logits.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            input.student_logits.shape(),
            input.teacher_logits.shape()
        )));
    }
    let teacher = argmax_rows(input.teacher_logits)?;
    let mut g = Graph::inference();
    let z = g.constant(input.student_logits.clone());
    let l = distilled_loss_node(
        &mut g,
        z,
        input.labels,
        Some(&teacher),
        input.alpha,
        0.0,
        input.labels.len().max(1),
    )?;
    Ok(g.value(l).data()[0].f64())
}

/// Training objective as a graph node. Without teacher labels this is the
/// plain smoothed cross-entropy; with them it is the `α`-mix of the
/// ground-truth and teacher-label terms, both smoothed alike.
pub fn distilled_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    labels: &[usize],
    teacher: Option<&[usize]>,
    alpha: f64,
    smoothing: f64,
    denom: usize,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let ce = g.cross_entropy(student, labels, smoothing, denom)?;
    let Some(teacher) = teacher else {
        return Ok(ce);
    };
    let kd = g.cross_entropy(student, teacher, smoothing, denom)?;
    let a = g.scale(ce, T::of(alpha))?;
    let b = g.scale(kd, T::of(1.0 - alpha))?;
    g.add(a, b)
}
