//! Emotion classifier, task loss, self-distillation heads and losses.

use crate::data::PAD_LABEL;
use crate::error::{LpgError, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Direction of the distillation KL term. The written form of the loss is
/// KL(student ‖ teacher); the reverse is the more common convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    #[default]
    StudentTeacher,
    TeacherStudent,
}

/// Scalar loss components of one step, with their tape handles.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub task: Var,
    pub ce_t: Option<Var>,
    pub ce_a: Option<Var>,
    pub kl_t: Option<Var>,
    pub kl_a: Option<Var>,
    pub total: Var,
}

/// Plain-value snapshot of the loss components of one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    pub task: f64,
    pub ce_t: f64,
    pub ce_a: f64,
    pub kl_t: f64,
    pub kl_a: f64,
    pub total: f64,
    pub lambdas: (f64, f64, f64),
}

/// E = f·W_c + b_c, probabilities by softmax over classes.
pub fn classify(tape: &mut Tape, f_final: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let logits = tape.linear(f_final, w, Some(b))?;
    let probs = tape.softmax_last(logits)?;
    Ok((logits, probs))
}

fn valid_count(labels: &[i64]) -> Result<f64> {
    let n = labels.iter().filter(|&&l| l != PAD_LABEL).count();
    if n == 0 {
        return Err(LpgError::contract("no valid utterances in batch".to_string()));
    }
    Ok(n as f64)
}

/// Mean negative log-likelihood over valid utterances.
///
/// Computed as -(1/N) Σ onehot ⊙ log-softmax(logits); padded rows carry an
/// all-zero one-hot and contribute nothing.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[i64], classes: usize) -> Result<Var> {
    let n = valid_count(labels)?;
    let logp = tape.log_softmax_last(logits)?;
    let mut weight = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l != PAD_LABEL {
            weight[i * classes + l as usize] = -1.0 / n;
        }
    }
    let picked = tape.mul_const(logp, &weight)?;
    tape.sum_all(picked)
}

/// Student head: E = ReLU(h)·W' + b'; returns (logits, probs, soft probs).
/// With τ = 1 the two distributions are computed from identical inputs and
/// match bitwise.
pub fn student_forward(
    tape: &mut Tape,
    h: Var,
    w: Var,
    b: Var,
    tau: f64,
) -> Result<(Var, Var, Var)> {
    if tau <= 0.0 {
        return Err(LpgError::contract(format!("temperature {tau} must be positive")));
    }
    let act = tape.relu(h)?;
    let logits = tape.linear(act, w, Some(b))?;
    let probs = tape.softmax_last(logits)?;
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let soft = tape.softmax_last(scaled)?;
    Ok((logits, probs, soft))
}

/// Softened teacher distribution, computed outside the tape so no gradient
/// flows into the teacher through the distillation terms.
pub fn teacher_soft_detached(tape: &Tape, teacher_logits: Var, tau: f64, classes: usize) -> Vec<f64> {
    let data = tape.data(teacher_logits);
    let mut out = vec![0.0; data.len()];
    for (row_out, row_in) in out.chunks_mut(classes).zip(data.chunks(classes)) {
        let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v / tau - mx).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Distillation KL for one student, averaged over valid utterances.
///
/// `StudentTeacher` evaluates Σ s·(log s − log t) per row, exactly as the
/// loss is written; `TeacherStudent` evaluates Σ t·(log t − log s).
pub fn distill_kl(
    tape: &mut Tape,
    student_logits: Var,
    teacher_soft: &[f64],
    tau: f64,
    labels: &[i64],
    classes: usize,
    direction: KlDirection,
) -> Result<Var> {
    let n = valid_count(labels)?;
    let scaled = tape.scale(student_logits, 1.0 / tau)?;
    let log_s = tape.log_softmax_last(scaled)?;
    match direction {
        KlDirection::StudentTeacher => {
            let s = tape.softmax_last(scaled)?;
            let neg_log_t: Vec<f64> = teacher_soft.iter().map(|&t| -t.ln()).collect();
            let diff = tape.add_const(log_s, &neg_log_t)?;
            let per_elem = tape.mul(s, diff)?;
            let mut mask = vec![0.0; labels.len() * classes];
            for (i, &l) in labels.iter().enumerate() {
                if l != PAD_LABEL {
                    mask[i * classes..(i + 1) * classes].iter_mut().for_each(|m| *m = 1.0 / n);
                }
            }
            let masked = tape.mul_const(per_elem, &mask)?;
            tape.sum_all(masked)
        }
        KlDirection::TeacherStudent => {
            // Σ t·log t is constant; only -Σ t·log s needs the tape.
            let mut weight = vec![0.0; labels.len() * classes];
            let mut entropy_term = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l != PAD_LABEL {
                    for j in 0..classes {
                        let t = teacher_soft[i * classes + j];
                        weight[i * classes + j] = -t / n;
                        entropy_term += t * t.ln() / n;
                    }
                }
            }
            let cross = tape.mul_const(log_s, &weight)?;
            let cross_sum = tape.sum_all(cross)?;
            let offset = tape.scalar(entropy_term);
            tape.add(cross_sum, offset)
        }
    }
}

/// λ-weighted total of the task and student terms; missing student terms count 0.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    students: &[(Option<Var>, Option<Var>)],
    lambdas: (f64, f64, f64),
) -> Result<Var> {
    let (l_task, l_ce, l_kl) = lambdas;
    if l_task < 0.0 || l_ce < 0.0 || l_kl < 0.0 {
        return Err(LpgError::contract(format!("negative loss weight in {lambdas:?}")));
    }
    let mut total = tape.scale(task, l_task)?;
    for &(ce, kl) in students {
        if let Some(ce) = ce {
            let term = tape.scale(ce, l_ce)?;
            total = tape.add(total, term)?;
        }
        if let Some(kl) = kl {
            let term = tape.scale(kl, l_kl)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}
