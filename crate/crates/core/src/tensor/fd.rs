//! Central-difference gradient oracle.
//!
//! Every analytic gradient in the crate is checked against these. The
//! oracle only ever calls the scalar function, never the analytic path.

use super::FeatureMap;
use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` over a flat vector.
pub fn finite_diff_grad_slice(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// [`finite_diff_grad_slice`] for a scalar function of a feature map.
pub fn finite_diff_grad(f: impl Fn(&FeatureMap) -> f64, x: &FeatureMap, h: f64) -> Result<FeatureMap> {
    let (c, hh, w) = x.shape();
    let grad = finite_diff_grad_slice(
        |v| {
            let m = FeatureMap::new(c, hh, w, v.to_vec()).expect("shape preserved");
            f(&m)
        },
        x.data(),
        h,
    )?;
    FeatureMap::new(c, hh, w, grad)
}

/// Elementwise agreement summary between an analytic and a numeric gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradComparison {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub mismatches: usize,
    pub passed: bool,
}

/// An entry passes when `|a - n| <= abs_tol` or `|a - n| / max(|a|, |n|) <= rel_tol`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> GradComparison {
    let mut out = GradComparison {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: None,
        mismatches: 0,
        passed: analytic.len() == numeric.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        out.max_abs_err = out.max_abs_err.max(err);
        let ok = err <= abs_tol || rel <= rel_tol;
        if !ok || !err.is_finite() {
            out.mismatches += 1;
            out.passed = false;
        }
        // Entries inside the absolute floor do not count toward the worst relative error.
        if err > abs_tol && rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = Some(i);
        }
    }
    out
}
