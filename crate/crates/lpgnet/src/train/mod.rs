//! Deterministic training loop, evaluation, and run configuration.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use metrics::MetricsReport;

use crate::data::{pad_batch, DatasetSplit, Dialogue, PAD_LABEL};
use crate::error::{LpgError, Result};
use crate::model::{Ablation, KlDirection, LossBundle, LpgNet, ModelConfig};
use crate::tensor::gradcheck::ParamSet;
use crate::tensor::{Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named RNG streams derived from one seed. Adding a consumer never
/// perturbs existing streams.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SYNTH: u64 = 3;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    /// multiplier for d_ff over hidden; 2 or 4
    pub d_ff_mult: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub tau: f64,
    pub lambda_task: f64,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub kl_direction: KlDirection,
    pub enable_students: bool,
    pub seed: u64,
    pub ablation: Ablation,
    /// max gradient L2 norm; off by default
    pub grad_clip: Option<f64>,
    /// train/validation ratio used when a dataset has no validation split
    pub val_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            hidden: 768,
            d_ff_mult: 2,
            epochs: 150,
            weight_decay: 1e-5,
            dropout: 0.1,
            tau: 1.0,
            lambda_task: 1.5,
            lambda_ce: 1.0,
            lambda_kl: 0.3,
            kl_direction: KlDirection::StudentTeacher,
            enable_students: true,
            seed: 0,
            ablation: Ablation::None,
            grad_clip: None,
            val_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    /// Small preset for desk-scale experiments and tests.
    pub fn desk() -> Self {
        TrainConfig { hidden: 64, epochs: 50, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(LpgError::contract("rates and sizes must be positive".to_string()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(LpgError::contract("bad weight_decay or dropout".to_string()));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return Err(LpgError::contract("val_ratio must be in [0,1)".to_string()));
        }
        Ok(())
    }

    pub fn model_config(&self, f_t: usize, f_a: usize, classes: usize) -> ModelConfig {
        let mut mc = ModelConfig::desk(f_t, f_a, classes, self.hidden);
        mc.d_ff = self.d_ff_mult * self.hidden;
        mc.dropout = self.dropout;
        mc.tau = self.tau;
        mc.lambda_task = self.lambda_task;
        mc.lambda_ce = self.lambda_ce;
        mc.lambda_kl = self.lambda_kl;
        mc.kl_direction = self.kl_direction;
        mc.enable_students = self.enable_students;
        mc.ablation = self.ablation;
        mc
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub last_bundle: LossBundle,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn fisher_yates(indices: &mut [usize], rng: &mut impl Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
fn clip_grads(model: &mut LpgNet, names: &[String], max_norm: f64) {
    let mut sq = 0.0;
    for n in names {
        if let Some(g) = &ParamSet::param(model, n).grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for n in names {
            if let Some(g) = &mut model.param_mut(n).grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Deterministic training over a split dataset, selecting the best epoch by
/// validation macro-F1.
pub fn train(config: &TrainConfig, data: &DatasetSplit) -> Result<TrainResult> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(LpgError::contract("train and validation splits must be non-empty"));
    }
    if config.batch_size >= 2 && data.train.len() % config.batch_size == 1 {
        return Err(LpgError::contract(
            "final training batch would hold a single dialogue, which batch-norm \
             rejects in train mode; adjust batch_size or dialogue count"
                .to_string(),
        ));
    }
    let header = &data.header;
    let mc = config.model_config(header.f_t, header.f_a, header.num_classes);
    let mut model = LpgNet::new(mc, config.seed.wrapping_add(streams::INIT))?;
    let names = model.param_names();
    let adam_cfg = AdamConfig::new(config.learning_rate, config.weight_decay);
    let mut adam = AdamState::new();
    let mut shuffle_rng = rng_stream(config.seed, streams::SHUFFLE);
    let mut dropout_rng = rng_stream(config.seed, streams::DROPOUT);

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, LpgNet, usize)> = None;
    let mut indices: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.epochs {
        fisher_yates(&mut indices, &mut shuffle_rng);
        let ordered: Vec<Dialogue> = indices.iter().map(|&i| data.train[i].clone()).collect();
        let batches = pad_batch(&ordered, config.batch_size, header.f_t, header.f_a)?;
        let mut loss_sum = 0.0;
        let mut last_bundle = None;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let step =
                model.forward_loss(&mut tape, batch, Mode::Train, &mut dropout_rng)?;
            let bundle = step.bundle.expect("training step has a loss");
            if !bundle.total.is_finite() {
                return Err(LpgError::Divergence { epoch, batch: bi, loss: bundle.total });
            }
            loss_sum += bundle.total;
            let loss = step.loss.expect("training step has a loss");
            tape.backward(loss.total)?;
            model.params.zero_grads(true);
            model.accumulate_grads(&tape, &step.bound);
            if let Some(max_norm) = config.grad_clip {
                clip_grads(&mut model, &names, max_norm);
            }
            adam.step(&mut model, &names, &adam_cfg)?;
            last_bundle = Some(bundle);
        }
        let val_report = evaluate(&mut model, &data.val, config.batch_size, header.num_classes)?;
        let record = EpochRecord {
            epoch,
            mean_train_loss: loss_sum / data.train.len().max(1) as f64,
            last_bundle: last_bundle.expect("at least one batch"),
            val_accuracy: val_report.accuracy,
            val_macro_f1: val_report.macro_f1,
        };
        let improved = best.as_ref().map(|(f1, _, _)| val_report.macro_f1 > *f1).unwrap_or(true);
        if improved {
            best = Some((val_report.macro_f1, model.clone(), epoch));
        }
        history.push(record);
    }
    let (_, best_model, best_epoch) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        model: best_model,
        epoch: best_epoch,
        train_config: config.clone(),
        history: history.clone(),
    };
    Ok(TrainResult { checkpoint, history })
}

/// Evaluates a model over dialogues in eval mode.
pub fn evaluate(
    model: &mut LpgNet,
    dialogues: &[Dialogue],
    batch_size: usize,
    classes: usize,
) -> Result<MetricsReport> {
    if dialogues.is_empty() {
        return Err(LpgError::contract("empty evaluation set".to_string()));
    }
    let (f_t, f_a) = {
        let u = &dialogues[0].utterances[0];
        (u.text_feat.len(), u.audio_feat.len())
    };
    let batches = pad_batch(dialogues, batch_size, f_t, f_a)?;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut rng = rng_stream(0, streams::DROPOUT); // unused in eval mode
    for batch in &batches {
        let mut tape = Tape::new();
        let (_, out) = model.forward(&mut tape, batch, Mode::Eval, &mut rng)?;
        let probs = tape.data(out.probs);
        for (i, &label) in batch.labels.iter().enumerate() {
            if label == PAD_LABEL {
                continue;
            }
            let row = &probs[i * classes..(i + 1) * classes];
            pairs.push((label as usize, crate::data::probe::argmax(row)));
        }
    }
    let confusion = metrics::confusion_from_pairs(&pairs, classes)?;
    metrics::metrics_from_confusion(confusion)
}
