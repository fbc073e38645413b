//! Wall-clock comparison of the parallel-attention model against the stacked
//! encoder baseline: forward-only and full training-step latency over a grid
//! of hidden sizes and sequence lengths.

use crate::baseline::{BaselineConfig, StackedBaseline};
use crate::data::DialogueBatch;
use crate::error::Result;
use crate::model::{LpgNet, ModelConfig};
use crate::tensor::{Mode, Tape, Tensor};
use crate::train::{rng_stream, streams, AdamConfig, AdamState};
use crate::tensor::gradcheck::ParamSet;
use rand::Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub arch: String,
    pub hidden: usize,
    pub seq_len: usize,
    pub params: usize,
    pub forward_ms: f64,
    pub step_ms: f64,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "arch,hidden,seq_len,params,forward_ms,step_ms"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3}",
            self.arch, self.hidden, self.seq_len, self.params, self.forward_ms, self.step_ms
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub(crate) fn random_batch(
    f_t: usize,
    f_a: usize,
    classes: usize,
    u: usize,
    rng: &mut impl Rng,
) -> Result<DialogueBatch> {
    let b = 2;
    Ok(DialogueBatch {
        text_feats: Tensor::from_vec(
            vec![b, u, f_t],
            (0..b * u * f_t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?,
        audio_feats: Tensor::from_vec(
            vec![b, u, f_a],
            (0..b * u * f_a).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?,
        mask: Tensor::from_vec(vec![b, u], vec![1.0; b * u])?,
        labels: (0..b * u).map(|_| rng.gen_range(0..classes) as i64).collect(),
        batch: b,
        u_max: u,
    })
}

/// Runs the benchmark grid. Each (dim, seq_len) cell yields two rows, one per
/// architecture, with median-of-`repeats` timings.
pub fn run_bench(dims: &[usize], seq_lens: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let (f_t, f_a, classes) = (32, 32, 4);
    let mut rng = rng_stream(seed, streams::SYNTH);
    let mut rows = Vec::new();
    for &d in dims {
        for &u in seq_lens {
            let batch = random_batch(f_t, f_a, classes, u, &mut rng)?;

            let mut mc = ModelConfig::desk(f_t, f_a, classes, d);
            mc.dropout = 0.0;
            let mut model = LpgNet::new(mc, seed)?;
            let names = model.param_names();
            let adam_cfg = AdamConfig::new(3e-4, 0.0);
            let mut adam = AdamState::new();
            let mut drop_rng = rng_stream(seed, streams::DROPOUT);
            let mut fwd = Vec::with_capacity(repeats);
            let mut step = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                let mut tape = Tape::new();
                model.forward(&mut tape, &batch, Mode::Eval, &mut drop_rng)?;
                fwd.push(t0.elapsed().as_secs_f64() * 1e3);

                let t0 = Instant::now();
                let mut tape = Tape::new();
                let out = model.forward_loss(&mut tape, &batch, Mode::Train, &mut drop_rng)?;
                tape.backward(out.loss.unwrap().total)?;
                model.params.zero_grads(true);
                model.accumulate_grads(&tape, &out.bound);
                adam.step(&mut model, &names, &adam_cfg)?;
                step.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            rows.push(BenchRow {
                arch: "lpgnet".into(),
                hidden: d,
                seq_len: u,
                params: model.param_count().total,
                forward_ms: median(fwd),
                step_ms: median(step),
            });

            let mut base = StackedBaseline::new(BaselineConfig::new(f_t, f_a, classes, d), seed);
            let base_names = base.params.param_names();
            let mut base_adam = AdamState::new();
            let mut fwd = Vec::with_capacity(repeats);
            let mut step = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                let mut tape = Tape::new();
                base.forward(&mut tape, &batch)?;
                fwd.push(t0.elapsed().as_secs_f64() * 1e3);

                let t0 = Instant::now();
                let mut tape = Tape::new();
                let (bound, _, loss) = base.forward_loss(&mut tape, &batch)?;
                tape.backward(loss)?;
                base.zero_grads();
                base.accumulate_grads(&tape, &bound);
                base_adam.step(&mut base.params, &base_names, &adam_cfg)?;
                step.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            rows.push(BenchRow {
                arch: "stacked".into(),
                hidden: d,
                seq_len: u,
                params: base.param_count(),
                forward_ms: median(fwd),
                step_ms: median(step),
            });
        }
    }
    Ok(rows)
}
