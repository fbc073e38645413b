//! Central-difference verification of analytic gradients.

use crate::error::{LpgError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Anything with named learnable tensors that can be nudged coordinatewise.
pub trait ParamSet {
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> &Tensor;
    fn param_mut(&mut self, name: &str) -> &mut Tensor;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// parameter name and flat coordinate of the worst error
    pub worst: Option<(String, usize)>,
    /// worst error per parameter tensor
    pub per_group: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central differences of `f`.
///
///// `f` must be deterministic: the baseline value is evaluated twice and the
/// two results must agree bitwise. Coordinates are subsampled evenly when
/// `max_coords_per_tensor` is set.
pub fn finite_difference_check<P, F>(
    params: &mut P,
    mut f: F,
    analytic: &HashMap<String, Vec<f64>>,
    eps: f64,
    max_coords_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(LpgError::contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let base_a = f(params)?;
    let base_b = f(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(LpgError::contract(format!(
            "objective is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        per_group: Vec::new(),
        coords_checked: 0,
    };
    for name in params.param_names() {
        let grad = analytic.get(&name).ok_or_else(|| {
            LpgError::contract(format!("no analytic gradient recorded for '{name}'"))
        })?;
        let len = params.param(&name).numel();
        if grad.len() != len {
            return Err(LpgError::dim(format!(
                "analytic gradient for '{name}' has {} entries, tensor has {len}",
                grad.len()
            )));
        }
        let coords: Vec<usize> = match max_coords_per_tensor {
            Some(k) if k < len => {
                let stride = len as f64 / k as f64;
                (0..k).map(|j| (j as f64 * stride) as usize).collect()
            }
            _ => (0..len).collect(),
        };
        let mut group_worst = 0.0f64;
        for c in coords {
            let orig = params.param(&name).data[c];
            params.param_mut(&name).data[c] = orig + eps;
            let fp = f(params)?;
            params.param_mut(&name).data[c] = orig - eps;
            let fm = f(params)?;
            params.param_mut(&name).data[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > group_worst {
                group_worst = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), c));
            }
        }
        report.per_group.push((name, group_worst));
    }
    Ok(report)
}

/// Flat list of named tensors; the simplest [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVec {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamVec {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }
}

impl ParamSet for ParamVec {
    fn param_names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    fn param(&self, name: &str) -> &Tensor {
        &self.entries.iter().find(|(n, _)| n == name).expect("unknown parameter").1
    }

    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.iter_mut().find(|(n, _)| n == name).expect("unknown parameter").1
    }
}
