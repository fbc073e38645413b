//! End-to-end gradient verification: analytic tape gradients of the full
//! training loss against central finite differences on a tiny model.

use crate::data::DialogueBatch;
use crate::error::Result;
use crate::model::{LpgNet, ModelConfig};
use crate::tensor::gradcheck::{finite_difference_check, GradCheckReport};
use crate::tensor::{Mode, Tape, Tensor};
use crate::train::{rng_stream, streams};
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub hidden: usize,
    pub features: usize,
    pub classes: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub eps: f64,
    /// limit finite-difference probes per tensor; None checks every scalar
    pub max_coords_per_tensor: Option<usize>,
    /// drop the distillation heads and their loss terms
    pub freeze_students: bool,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            hidden: 8,
            features: 8,
            classes: 4,
            batch: 2,
            seq_len: 3,
            eps: 1e-5,
            max_coords_per_tensor: None,
            freeze_students: false,
            seed: 17,
        }
    }
}

fn tiny_batch(s: &GradCheckSettings, rng: &mut impl Rng) -> Result<DialogueBatch> {
    let (b, u, f) = (s.batch, s.seq_len, s.features);
    // last position of the last dialogue is padding, so masking is exercised
    let mut mask = vec![1.0; b * u];
    mask[b * u - 1] = 0.0;
    let feat = |n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let mut labels: Vec<i64> =
        (0..b * u).map(|i| (i % s.classes) as i64).collect();
    labels[b * u - 1] = crate::data::PAD_LABEL;
    Ok(DialogueBatch {
        text_feats: Tensor::from_vec(vec![b, u, f], feat(b * u * f, rng))?,
        audio_feats: Tensor::from_vec(vec![b, u, f], feat(b * u * f, rng))?,
        mask: Tensor::from_vec(vec![b, u], mask)?,
        labels,
        batch: b,
        u_max: u,
    })
}

/// Checks every analytic gradient of the full loss (task + distillation)
/// against central differences, with dropout off and eval-mode batch norm.
pub fn gradcheck_full_loss(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::desk(
        settings.features,
        settings.features,
        settings.classes,
        settings.hidden,
    );
    cfg.dropout = 0.0;
    if settings.freeze_students {
        cfg.enable_students = false;
        cfg.lambda_ce = 0.0;
        cfg.lambda_kl = 0.0;
    }
    let mut model = LpgNet::new(cfg, settings.seed)?;
    let mut data_rng = rng_stream(settings.seed, streams::SYNTH);
    let batch = tiny_batch(settings, &mut data_rng)?;

    // nudge running stats off their init so eval-mode batch norm is non-trivial
    for p in &mut model.params.paths {
        for (i, v) in p.bn_running_mean.iter_mut().enumerate() {
            *v = 0.01 * (i as f64 + 1.0);
        }
        for (i, v) in p.bn_running_var.iter_mut().enumerate() {
            *v = 1.0 + 0.05 * i as f64;
        }
    }

    // The teacher distribution is detached from the gradient, so the
    // function under finite differences must hold it at its baseline value.
    let teacher_soft: Option<Vec<f64>> = if settings.freeze_students {
        None
    } else {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let mut rng = rng_stream(0, streams::DROPOUT); // unused: dropout is off
        let (_, out) = m.forward(&mut tape, &batch, Mode::Eval, &mut rng)?;
        Some(crate::model::heads::teacher_soft_detached(
            &mut tape,
            out.logits,
            m.config.tau,
            m.config.classes,
        ))
    };

    let loss_of = |m: &LpgNet, batch: &DialogueBatch| -> Result<f64> {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let mut rng = rng_stream(0, streams::DROPOUT);
        let step = m.forward_loss_with_teacher(
            &mut tape,
            batch,
            Mode::Eval,
            &mut rng,
            teacher_soft.as_deref(),
        )?;
        Ok(step.bundle.expect("loss requested").total)
    };

    let analytic: HashMap<String, Vec<f64>> = {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let mut rng = rng_stream(0, streams::DROPOUT);
        let step = m.forward_loss_with_teacher(
            &mut tape,
            &batch,
            Mode::Eval,
            &mut rng,
            teacher_soft.as_deref(),
        )?;
        let loss = step.loss.expect("loss requested");
        tape.backward(loss.total)?;
        m.grads_by_name(&tape, &step.bound)
    };

    finite_difference_check(
        &mut model,
        |m| loss_of(m, &batch),
        &analytic,
        settings.eps,
        settings.max_coords_per_tensor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampled_full_loss_gradcheck_passes() {
        let settings = GradCheckSettings {
            max_coords_per_tensor: Some(2),
            ..GradCheckSettings::default()
        };
        let report = gradcheck_full_loss(&settings).unwrap();
        assert!(report.max_rel_err < 1e-3, "max_rel_err {}", report.max_rel_err);
    }

    #[test]
    fn frozen_student_gradcheck_passes() {
        let settings = GradCheckSettings {
            max_coords_per_tensor: Some(2),
            freeze_students: true,
            ..GradCheckSettings::default()
        };
        let report = gradcheck_full_loss(&settings).unwrap();
        assert!(report.max_rel_err < 1e-3, "max_rel_err {}", report.max_rel_err);
    }
}
