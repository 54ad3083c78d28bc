//! Detail distillation losses: temperature-softened probabilities, soft-target
//! cross entropy, and the master objective
//! `L = CE(softmax(z_s), y) + lambda * L_soft(q_s, q_d)`.
//!
//! The teacher's logits are always detached: soft targets carry information
//! into the student, never gradients back into the teacher.

use crate::num::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Distillation hyperparameters: softmax temperature `T` and soft-loss
/// weight `lambda`.
#[derive(Debug, Clone, Copy)]
pub struct DistillConfig<T> {
    pub temperature: T,
    pub lambda: T,
}

impl<T: Real> Default for DistillConfig<T> {
    fn default() -> Self {
        DistillConfig {
            temperature: T::from_f64_lossy(10.0),
            lambda: T::from_f64_lossy(2.0),
        }
    }
}

impl<T: Real> DistillConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > T::zero()) {
            return Err(TensorError::Domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda < T::zero() {
            return Err(TensorError::Domain(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_logits<T: Real>(z: &Tensor<T>) -> Result<()> {
    if z.numel() < 2 {
        return Err(TensorError::ShapeMismatch(
            "logits need at least 2 classes".into(),
        ));
    }
    if !z.all_finite() {
        return Err(TensorError::NonFinite("logits"));
    }
    Ok(())
}

/// `q_i = exp(z_i / T) / sum_j exp(z_j / T)` with max-subtraction.
pub fn softened_probs<T: Real>(z: &[T], temperature: T) -> Result<Vec<T>> {
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    check_logits(&zt)?;
    let tape = Tape::new();
    let v = tape.constant(zt);
    let q = tape.softmax_rows(v, temperature)?;
    Ok(tape.value(q).data().to_vec())
}

/// `-sum_i q_d_i * log(q_s_i)`. The teacher distribution `q_d` is a
/// constant; no gradient semantics are attached here.
pub fn soft_target_ce<T: Real>(q_s: &[T], q_d: &[T]) -> Result<T> {
    if q_s.len() != q_d.len() || q_s.len() < 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "probability vectors of lengths {} and {}",
            q_s.len(),
            q_d.len()
        )));
    }
    let tol = T::from_f64_lossy(1e-6);
    for (name, q) in [("q_s", q_s), ("q_d", q_d)] {
        let sum: T = q.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(TensorError::Domain(format!("{name} does not sum to 1")));
        }
    }
    if q_s.iter().any(|&v| v <= T::zero()) {
        return Err(TensorError::Domain("q_s entry is not positive".into()));
    }
    let mut loss = T::zero();
    for (&s, &d) in q_s.iter().zip(q_d) {
        loss -= d * s.ln();
    }
    Ok(loss)
}

/// Cross entropy of softmax(logits at T=1) against a one-hot label,
/// recorded on the tape.
pub fn cross_entropy_on_tape<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    label: usize,
) -> Result<Var> {
    let n = tape.shape_of(logits).iter().product::<usize>();
    if label >= n {
        return Err(TensorError::Usage(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let flat = tape.reshape(logits, vec![1, n])?;
    let q = tape.softmax_rows(flat, T::one())?;
    let logq = tape.log(q)?;
    let mut onehot = Tensor::zeros(vec![1, n]);
    onehot.data_mut()[label] = T::one();
    let y = tape.constant(onehot);
    let picked = tape.mul(logq, y)?;
    let s = tape.reduce_sum(picked)?;
    tape.scale(s, -T::one())
}

/// The master objective on the tape. `z_d` is detached before the soft term,
/// so no gradient ever reaches the teacher.
pub fn master_loss_on_tape<T: Real>(
    tape: &Tape<T>,
    z_s: Var,
    z_d: Var,
    label: usize,
    cfg: &DistillConfig<T>,
) -> Result<Var> {
    cfg.validate()?;
    let cls = cross_entropy_on_tape(tape, z_s, label)?;
    if cfg.lambda == T::zero() {
        return Ok(cls);
    }
    let n = tape.shape_of(z_s).iter().product::<usize>();
    let zs_flat = tape.reshape(z_s, vec![1, n])?;
    let zd_flat = tape.reshape(tape.detach(z_d), vec![1, n])?;
    let q_s = tape.softmax_rows(zs_flat, cfg.temperature)?;
    let q_d = tape.softmax_rows(zd_flat, cfg.temperature)?;
    let logq = tape.log(q_s)?;
    let prod = tape.mul(logq, q_d)?;
    let s = tape.reduce_sum(prod)?;
    let soft = tape.scale(s, -cfg.lambda)?;
    tape.add(cls, soft)
}

/// `L = CE(softmax(z_s), label) + lambda * L_soft(q_s^T, q_d^T)` as a plain
/// scalar.
pub fn master_loss<T: Real>(
    z_s: &[T],
    z_d: &[T],
    label: usize,
    cfg: &DistillConfig<T>,
) -> Result<T> {
    if z_s.len() != z_d.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "logit vectors of lengths {} and {}",
            z_s.len(),
            z_d.len()
        )));
    }
    let tape = Tape::new();
    let zs = tape.constant(Tensor::new(vec![1, z_s.len()], z_s.to_vec())?);
    let zd = tape.constant(Tensor::new(vec![1, z_d.len()], z_d.to_vec())?);
    let loss = master_loss_on_tape(&tape, zs, zd, label, cfg)?;
    tape.value(loss).item()
}
