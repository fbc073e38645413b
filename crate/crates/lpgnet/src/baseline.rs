//! Efficiency baseline: two stacked post-norm Transformer encoder layers per
//! modality, single-head, with a concat + linear classifier on top.
//!
//! This exists to compare parameter counts and step latency against the
//! parallel-attention block, so it shares the tape, optimizer, and metrics.

use crate::data::{DialogueBatch, PAD_LABEL};
use crate::error::Result;
use crate::model::heads::task_loss;
use crate::model::lpia::masked_attention;
use crate::tensor::gradcheck::{ParamSet, ParamVec};
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LAYERS_PER_MODALITY: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub f_t: usize,
    pub f_a: usize,
    pub classes: usize,
    pub hidden: usize,
    pub d_ff: usize,
    pub ln_eps: f64,
}

impl BaselineConfig {
    pub fn new(f_t: usize, f_a: usize, classes: usize, hidden: usize) -> Self {
        BaselineConfig { f_t, f_a, classes, hidden, d_ff: 2 * hidden, ln_eps: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct StackedBaseline {
    pub config: BaselineConfig,
    pub params: ParamVec,
}

fn layer_names(modality: &str, layer: usize) -> Vec<String> {
    [
        "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta",
    ]
    .iter()
    .map(|s| format!("enc.{modality}.{layer}.{s}"))
    .collect()
}

impl StackedBaseline {
    pub fn new(config: BaselineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mut params = ParamVec { entries: Vec::new() };
        let weight = |m: usize, n: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(vec![m, n], 1.0 / (m as f64).sqrt(), rng)
        };
        let bias = |n: usize| {
            let mut t = Tensor::zeros(vec![n]);
            t.requires_grad = true;
            t
        };
        let ones = |n: usize| {
            let mut t = Tensor::full(vec![n], 1.0);
            t.requires_grad = true;
            t
        };
        params.push("proj.t.w", weight(config.f_t, d, &mut rng));
        params.push("proj.t.b", bias(d));
        params.push("proj.a.w", weight(config.f_a, d, &mut rng));
        params.push("proj.a.b", bias(d));
        for modality in ["t", "a"] {
            for layer in 0..LAYERS_PER_MODALITY {
                let names = layer_names(modality, layer);
                for name in names {
                    let t = match name.rsplit('.').next().unwrap() {
                        "wq" | "wk" | "wv" | "wo" => weight(d, d, &mut rng),
                        "bq" | "bk" | "bv" | "bo" | "b2" | "beta" => bias(d),
                        "gamma" => ones(d),
                        "w1" => weight(d, config.d_ff, &mut rng),
                        "b1" => bias(config.d_ff),
                        "w2" => weight(config.d_ff, d, &mut rng),
                        other => unreachable!("unexpected parameter suffix {other}"),
                    };
                    params.push(name, t);
                }
            }
        }
        params.push("head.w", weight(2 * d, config.classes, &mut rng));
        params.push("head.b", bias(config.classes));
        StackedBaseline { config, params }
    }

    fn get(&self, tape: &mut Tape, bound: &mut Vec<(String, Var)>, name: &str) -> Var {
        let v = tape.leaf(ParamSet::param(&self.params, name));
        bound.push((name.to_string(), v));
        v
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        bound: &mut Vec<(String, Var)>,
        x: Var,
        mask: &[f64],
        prefix: &str,
    ) -> Result<Var> {
        let p = |s: &str| format!("{prefix}.{s}");
        let wq = self.get(tape, bound, &p("attn.wq"));
        let bq = self.get(tape, bound, &p("attn.bq"));
        let wk = self.get(tape, bound, &p("attn.wk"));
        let bk = self.get(tape, bound, &p("attn.bk"));
        let wv = self.get(tape, bound, &p("attn.wv"));
        let bv = self.get(tape, bound, &p("attn.bv"));
        let wo = self.get(tape, bound, &p("attn.wo"));
        let bo = self.get(tape, bound, &p("attn.bo"));
        let q = tape.linear(x, wq, Some(bq))?;
        let k = tape.linear(x, wk, Some(bk))?;
        let v = tape.linear(x, wv, Some(bv))?;
        let (_, attn) = masked_attention(tape, q, k, v, mask)?;
        let attn = tape.linear(attn, wo, Some(bo))?;
        let res = tape.add(x, attn)?;
        let g1 = self.get(tape, bound, &p("ln1.gamma"));
        let b1 = self.get(tape, bound, &p("ln1.beta"));
        let normed = tape.layer_norm(res, g1, b1, self.config.ln_eps)?;
        let w1 = self.get(tape, bound, &p("ffn.w1"));
        let fb1 = self.get(tape, bound, &p("ffn.b1"));
        let w2 = self.get(tape, bound, &p("ffn.w2"));
        let fb2 = self.get(tape, bound, &p("ffn.b2"));
        let h = tape.linear(normed, w1, Some(fb1))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, w2, Some(fb2))?;
        let res2 = tape.add(normed, h)?;
        let g2 = self.get(tape, bound, &p("ln2.gamma"));
        let b2 = self.get(tape, bound, &p("ln2.beta"));
        tape.layer_norm(res2, g2, b2, self.config.ln_eps)
    }

    /// Forward pass: returns bound leaves, logits, and probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &DialogueBatch,
    ) -> Result<(Vec<(String, Var)>, Var, Var)> {
        let mut bound = Vec::new();
        let mut streams = Vec::with_capacity(2);
        for (modality, feats) in [("t", &batch.text_feats), ("a", &batch.audio_feats)] {
            let w = self.get(tape, &mut bound, &format!("proj.{modality}.w"));
            let b = self.get(tape, &mut bound, &format!("proj.{modality}.b"));
            let x = tape.leaf(feats);
            let mut h = tape.linear(x, w, Some(b))?;
            for layer in 0..LAYERS_PER_MODALITY {
                h = self.encoder_layer(
                    tape,
                    &mut bound,
                    h,
                    &batch.mask.data,
                    &format!("enc.{modality}.{layer}"),
                )?;
            }
            streams.push(h);
        }
        let joint = tape.concat_last(streams[0], streams[1])?;
        let hw = self.get(tape, &mut bound, "head.w");
        let hb = self.get(tape, &mut bound, "head.b");
        let logits = tape.linear(joint, hw, Some(hb))?;
        let probs = tape.softmax_last(logits)?;
        Ok((bound, logits, probs))
    }

    /// One forward + masked cross-entropy; no distillation terms.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        batch: &DialogueBatch,
    ) -> Result<(Vec<(String, Var)>, Var, Var)> {
        let (bound, logits, probs) = self.forward(tape, batch)?;
        let loss = task_loss(tape, logits, &batch.labels, self.config.classes)?;
        let _ = probs;
        Ok((bound, logits, loss))
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[(String, Var)]) {
        for (name, var) in bound {
            let g = tape.grad(*var).to_vec();
            self.params.param_mut(name).accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.params.entries {
            t.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters of the encoder stacks alone (both modalities, all layers),
    /// excluding the input projections and classifier head.
    pub fn encoder_stack_param_count(&self) -> usize {
        self.params
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Greedy class predictions at valid positions, as (label, prediction).
    pub fn predict_pairs(&self, tape_probs: &[f64], batch: &DialogueBatch) -> Vec<(usize, usize)> {
        let c = self.config.classes;
        batch
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != PAD_LABEL)
            .map(|(i, &l)| {
                (l as usize, crate::data::probe::argmax(&tape_probs[i * c..(i + 1) * c]))
            })
            .collect()
    }
}

/// Trains the baseline with Adam for a fixed number of epochs; returns the
/// trained model. Shuffling mirrors the main loop's stream layout.
pub fn train_baseline(
    config: BaselineConfig,
    dialogues: &[crate::data::Dialogue],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<StackedBaseline> {
    use crate::train::{rng_stream, streams, AdamConfig, AdamState};
    let mut model = StackedBaseline::new(config, seed.wrapping_add(streams::INIT));
    let names = model.params.param_names();
    let adam_cfg = AdamConfig::new(lr, 0.0);
    let mut adam = AdamState::new();
    let mut shuffle_rng = rng_stream(seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let shuffled: Vec<_> = order.iter().map(|&i| dialogues[i].clone()).collect();
        let batches = crate::data::pad_batch(
            &shuffled,
            batch_size,
            model.config.f_t,
            model.config.f_a,
        )?;
        for batch in &batches {
            let mut tape = Tape::new();
            let (bound, _, loss) = model.forward_loss(&mut tape, batch)?;
            tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&tape, &bound);
            adam.step(&mut model.params, &names, &adam_cfg)?;
        }
    }
    Ok(model)
}

/// Accuracy of a trained baseline over dialogues.
pub fn evaluate_baseline(
    model: &StackedBaseline,
    dialogues: &[crate::data::Dialogue],
    batch_size: usize,
) -> Result<crate::train::MetricsReport> {
    let batches =
        crate::data::pad_batch(dialogues, batch_size, model.config.f_t, model.config.f_a)?;
    let mut pairs = Vec::new();
    for batch in &batches {
        let mut tape = Tape::new();
        let (_, _, probs) = model.forward(&mut tape, batch)?;
        pairs.extend(model.predict_pairs(tape.data(probs), batch));
    }
    let confusion = crate::train::metrics::confusion_from_pairs(&pairs, model.config.classes)?;
    crate::train::metrics::metrics_from_confusion(confusion)
}
