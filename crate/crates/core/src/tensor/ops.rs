use super::{FeatureMap, Matrix};
use crate::error::{Error, Result};

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of empty distribution"));
    }
    if let Some(bad) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid(format!("probability entry {bad} is negative or non-finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    let h = -p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>();
    // Rounding can push a one-hot result a hair below zero.
    Ok(h.max(0.0))
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += ad[i * k + t] * bd[t * m + j];
            }
            od[i * m + j] = acc;
        }
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_norm(f: &FeatureMap) -> f64 {
    l2_norm(f.data())
}

fn require_spatial(f: &FeatureMap) -> Result<()> {
    if f.height() < 2 || f.width() < 2 {
        return Err(Error::invalid(format!(
            "spatial gradient needs H, W >= 2, got {}x{}",
            f.height(),
            f.width()
        )));
    }
    Ok(())
}

/// Mean absolute horizontal and vertical neighbour differences.
pub fn spatial_grad_terms(f: &FeatureMap) -> Result<(f64, f64)> {
    require_spatial(f)?;
    let (c, h, w) = f.shape();
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f.get(ch, y, x);
                if x > 0 {
                    horiz += (v - f.get(ch, y, x - 1)).abs();
                }
                if y > 0 {
                    vert += (v - f.get(ch, y - 1, x)).abs();
                }
            }
        }
    }
    let nh = (c * h * (w - 1)) as f64;
    let nv = (c * (h - 1) * w) as f64;
    Ok((horiz / nh, vert / nv))
}

/// Average absolute spatial gradient: horizontal plus vertical term.
pub fn spatial_grad_mean(f: &FeatureMap) -> Result<f64> {
    let (h, v) = spatial_grad_terms(f)?;
    Ok(h + v)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`spatial_grad_mean`], using `sign(0) = 0`.
pub fn spatial_grad_mean_grad(f: &FeatureMap) -> Result<FeatureMap> {
    require_spatial(f)?;
    let (c, h, w) = f.shape();
    let nh = (c * h * (w - 1)) as f64;
    let nv = (c * (h - 1) * w) as f64;
    let mut g = f.zeros_like();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f.get(ch, y, x);
                if x > 0 {
                    let s = sign(v - f.get(ch, y, x - 1)) / nh;
                    let i = g.index(ch, y, x);
                    g.data_mut()[i] += s;
                    let j = g.index(ch, y, x - 1);
                    g.data_mut()[j] -= s;
                }
                if y > 0 {
                    let s = sign(v - f.get(ch, y - 1, x)) / nv;
                    let i = g.index(ch, y, x);
                    g.data_mut()[i] += s;
                    let j = g.index(ch, y - 1, x);
                    g.data_mut()[j] -= s;
                }
            }
        }
    }
    Ok(g)
}
