//! Dual-gated fusion: per-stream sigmoid gates with pair projection, then a
//! two-way softmax over modality scores.

use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Z = sigmoid(H·W_g), output Z ⊙ H. Gate entries lie strictly in (0,1).
pub fn gated_fusion(tape: &mut Tape, h: Var, w_g: Var) -> Result<Var> {
    let scores = tape.linear(h, w_g, None)?;
    let z = tape.sigmoid(scores)?;
    tape.mul(z, h)
}

/// Gates the four attention streams and projects each modality pair 2d → d.
/// With `gate_identity` the sigmoid gates are replaced by Z = 1.
#[allow(clippy::too_many_arguments)]
pub fn unimodal_fuse(
    tape: &mut Tape,
    x_tt: Var,
    x_at: Var,
    x_aa: Var,
    x_ta: Var,
    gates: &[Var; 4],
    pair_t: (Var, Var),
    pair_a: (Var, Var),
    gate_identity: bool,
) -> Result<(Var, Var)> {
    let [g_tt, g_aa, g_at, g_ta] = *gates;
    let (h_t, h_at, h_a, h_ta) = if gate_identity {
        (x_tt, x_at, x_aa, x_ta)
    } else {
        (
            gated_fusion(tape, x_tt, g_tt)?,
            gated_fusion(tape, x_at, g_at)?,
            gated_fusion(tape, x_aa, g_aa)?,
            gated_fusion(tape, x_ta, g_ta)?,
        )
    };
    let cat_t = tape.concat_last(h_t, h_at)?;
    let t_fused = tape.linear(cat_t, pair_t.0, Some(pair_t.1))?;
    let cat_a = tape.concat_last(h_a, h_ta)?;
    let a_fused = tape.linear(cat_a, pair_a.0, Some(pair_a.1))?;
    Ok((t_fused, a_fused))
}

/// Per-utterance scalar score for each modality through the shared map W,
/// softmax over the two-way modality axis, convex combination.
///
/// Softmax over two logits reduces to a sigmoid of their difference.
pub fn multimodal_fuse(
    tape: &mut Tape,
    t_fused: Var,
    a_fused: Var,
    w: Var,
    fixed_half: bool,
) -> Result<(Var, Var, Var)> {
    if fixed_half {
        let b_u: usize = tape.shape(t_fused)[..2].iter().product();
        let half = tape.leaf_from(vec![b_u], vec![0.5; b_u])?;
        let sum = tape.add(t_fused, a_fused)?;
        let f_final = tape.scale(sum, 0.5)?;
        return Ok((half, half, f_final));
    }
    let s_t = tape.linear(t_fused, w, None)?;
    let s_a = tape.linear(a_fused, w, None)?;
    let diff = tape.sub(s_t, s_a)?;
    let alpha_t = tape.sigmoid(diff)?;
    let neg_diff = tape.scale(diff, -1.0)?;
    let alpha_a = tape.sigmoid(neg_diff)?;
    let t_part = tape.scale_rows(t_fused, alpha_t)?;
    let a_part = tape.scale_rows(a_fused, alpha_a)?;
    let f_final = tape.add(t_part, a_part)?;
    Ok((alpha_t, alpha_a, f_final))
}
