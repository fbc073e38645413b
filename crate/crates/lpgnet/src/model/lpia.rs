//! Lightweight Parallel Interaction Attention: kernel-1 conv projection,
//! four mask-aware attention paths, two-stage residual enhancement.

use crate::error::{LpgError, Result};
use crate::model::{BoundEnhance, ModelConfig};
use crate::tensor::{Mode, Tape, Var};
use rand::Rng;

/// Kernel-size-1 convolution over the utterance axis: a shared per-position
/// affine map F_s → d.
pub fn project_conv1d(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(x, w, Some(b))
}

/// Scaled dot-product attention with key-validity masking.
///
/// Scores at masked keys are filled with -1e9 before the softmax, so a
/// masked key's weight underflows to zero for every query. Padded query
/// rows are computed but carry no meaning downstream.
pub fn masked_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &[f64],
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    if qs.len() != 3 {
        return Err(LpgError::dim(format!("masked_attention: expected [B,U,d], got {qs:?}")));
    }
    let (b, u, d) = (qs[0], qs[1], qs[2]);
    if tape.shape(k) != qs || tape.shape(v) != qs {
        return Err(LpgError::dim(format!(
            "masked_attention: q {qs:?}, k {:?}, v {:?}",
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if mask.len() != b * u {
        return Err(LpgError::dim(format!(
            "masked_attention: mask length {} vs B*U = {}",
            mask.len(),
            b * u
        )));
    }
    for batch in 0..b {
        if mask[batch * u..(batch + 1) * u].iter().all(|&m| m == 0.0) {
            return Err(LpgError::contract(format!(
                "dialogue {batch} has no valid utterances"
            )));
        }
    }
    let raw = tape.bmm_nt(q, k)?;
    let scaled = tape.scale(raw, 1.0 / (d as f64).sqrt())?;
    // M'[b,i,j] depends only on key validity M[b,j]
    let mut fill = vec![0.0; b * u * u];
    for batch in 0..b {
        for i in 0..u {
            for j in 0..u {
                if mask[batch * u + j] == 0.0 {
                    fill[(batch * u + i) * u + j] = -1e9;
                }
            }
        }
    }
    let masked = tape.add_const(scaled, &fill)?;
    let weights = tape.softmax_last(masked)?;
    let out = tape.bmm(weights, v)?;
    Ok((weights, out))
}

/// Per-batch masked mean over the utterance axis: [B,U,d] → [B,d].
pub fn masked_mean(tape: &mut Tape, x: Var, mask: &[f64]) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let (b, u, d) = (xs[0], xs[1], xs[2]);
    let mut mask_exp = vec![0.0; b * u * d];
    for bu in 0..b * u {
        if mask[bu] != 0.0 {
            mask_exp[bu * d..(bu + 1) * d].iter_mut().for_each(|m| *m = 1.0);
        }
    }
    let gated = tape.mul_const(x, &mask_exp)?;
    let summed = tape.sum_axis(gated, 1)?;
    let inv_counts: Vec<f64> = (0..b)
        .map(|batch| {
            let count: f64 = mask[batch * u..(batch + 1) * u].iter().sum();
            1.0 / count
        })
        .collect();
    let inv = tape.leaf_from(vec![b], inv_counts)?;
    tape.scale_rows(summed, inv)
}

/// Statistics emitted by a train-mode enhance pass, for running-stat updates.
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Two-stage residual enhancement of one attention path (the path's query
/// stream is the residual): masked mean → linear → batch-norm → LeakyReLU,
/// broadcast back over U, then X = Q + A_conv + FFN(A_conv).
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    tape: &mut Tape,
    q: Var,
    attn_out: Var,
    bound: &BoundEnhance,
    running_mean: &[f64],
    running_var: &[f64],
    mask: &[f64],
    mode: Mode,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Option<BnBatchStats>)> {
    let u = tape.shape(q)[1];
    let pooled = masked_mean(tape, attn_out, mask)?;
    let compressed = tape.linear(pooled, bound.comp_w, Some(bound.comp_b))?;
    let (normed, stats) = match mode {
        Mode::Train => {
            let (v, mean, var) =
                tape.batch_norm_train(compressed, bound.bn_gamma, bound.bn_beta, cfg.bn_eps)?;
            (v, Some(BnBatchStats { mean, var }))
        }
        Mode::Eval => (
            tape.batch_norm_eval(
                compressed,
                bound.bn_gamma,
                bound.bn_beta,
                running_mean,
                running_var,
                cfg.bn_eps,
            )?,
            None,
        ),
    };
    let activated = tape.leaky_relu(normed, cfg.leaky_slope)?;
    let a_conv = tape.broadcast_axis(activated, 1, u)?;

    let residual = tape.add(q, a_conv)?;
    if cfg.no_ffn() {
        return Ok((residual, stats));
    }
    let ln = tape.layer_norm(a_conv, bound.ln_gamma, bound.ln_beta, cfg.ln_eps)?;
    let h = tape.linear(ln, bound.w1, None)?;
    let act = tape.gelu(h)?;
    let dropped = tape.dropout(act, cfg.dropout, mode, rng)?;
    let ffn = tape.linear(dropped, bound.w2, None)?;
    let out = tape.add(residual, ffn)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn masked_keys_get_no_attention_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (b, u, d) = (rng.gen_range(1..4), rng.gen_range(2..7), rng.gen_range(2..9));
            let mut mask = vec![1.0; b * u];
            for bi in 0..b {
                let valid = rng.gen_range(1..=u);
                for j in valid..u {
                    mask[bi * u + j] = 0.0;
                }
            }
            let mut tape = Tape::new();
            let q = tape.leaf_from(vec![b, u, d], randv(b * u * d, &mut rng)).unwrap();
            let k = tape.leaf_from(vec![b, u, d], randv(b * u * d, &mut rng)).unwrap();
            let v = tape.leaf_from(vec![b, u, d], randv(b * u * d, &mut rng)).unwrap();
            let (weights, _) = masked_attention(&mut tape, q, k, v, &mask).unwrap();
            let wd = tape.data(weights);
            for bi in 0..b {
                for i in 0..u {
                    let mut masked_total = 0.0;
                    let mut row_total = 0.0;
                    for j in 0..u {
                        let w = wd[bi * u * u + i * u + j];
                        row_total += w;
                        if mask[bi * u + j] == 0.0 {
                            masked_total += w;
                        }
                    }
                    assert!(masked_total < 1e-30, "masked weight {masked_total}");
                    assert!((row_total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fully_masked_batch_row_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, u, d) = (2, 3, 4);
        let mut mask = vec![1.0; b * u];
        mask[u..].iter_mut().for_each(|m| *m = 0.0);
        let mut tape = Tape::new();
        let q = tape.leaf_from(vec![b, u, d], randv(b * u * d, &mut rng)).unwrap();
        assert!(masked_attention(&mut tape, q, q, q, &mask).is_err());
    }

    #[test]
    fn masked_mean_ignores_padded_positions() {
        let mut tape = Tape::new();
        // dialogue 0: valid rows [1,2] and [3,4]; padded row should not count
        let x = tape
            .leaf_from(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 99.0, 99.0])
            .unwrap();
        let mask = vec![1.0, 1.0, 0.0];
        let m = masked_mean(&mut tape, x, &mask).unwrap();
        assert_eq!(tape.data(m), &[2.0, 3.0]);
    }

    #[test]
    fn attention_output_at_valid_positions_ignores_padding_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, u, d) = (1, 4, 6);
        let mask = vec![1.0, 1.0, 1.0, 0.0];
        let base_q = randv(b * u * d, &mut rng);
        let base_k = randv(b * u * d, &mut rng);
        let base_v = randv(b * u * d, &mut rng);
        let run = |qd: &[f64], kd: &[f64], vd: &[f64]| {
            let mut tape = Tape::new();
            let q = tape.leaf_from(vec![b, u, d], qd.to_vec()).unwrap();
            let k = tape.leaf_from(vec![b, u, d], kd.to_vec()).unwrap();
            let v = tape.leaf_from(vec![b, u, d], vd.to_vec()).unwrap();
            let (_, out) = masked_attention(&mut tape, q, k, v, &mask).unwrap();
            tape.data(out).to_vec()
        };
        let clean = run(&base_q, &base_k, &base_v);
        // perturb key/value content at the padded position only
        let mut k2 = base_k.clone();
        let mut v2 = base_v.clone();
        for j in 0..d {
            k2[3 * d + j] += 17.0;
            v2[3 * d + j] -= 42.0;
        }
        let poked = run(&base_q, &k2, &v2);
        for i in 0..3 * d {
            assert!((clean[i] - poked[i]).abs() < 1e-6, "valid position changed");
        }
    }
}
