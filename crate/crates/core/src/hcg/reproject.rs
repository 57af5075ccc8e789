use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv1x1, conv1x1_backward, conv3x3, conv3x3_backward, matmul, FeatureMap, Kernel3x3, Matrix};

/// Row-sum tolerance accepted by [`reproject`].
const ROW_STOCHASTIC_TOL: f64 = 1e-6;

/// Query/key projections into a `d`-dimensional space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QKProjection {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl QKProjection {
    pub fn new(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::shape(format!(
                "query {:?} and key {:?} projections differ",
                w_q.shape(),
                w_k.shape()
            )));
        }
        if w_q.rows() > w_q.cols() {
            return Err(Error::invalid(format!(
                "projection dim {} exceeds channel count {}",
                w_q.rows(),
                w_q.cols()
            )));
        }
        Ok(Self { w_q, w_k })
    }

    pub fn zeros(dim: usize, channels: usize) -> Self {
        Self {
            w_q: Matrix::zeros(dim, channels),
            w_k: Matrix::zeros(dim, channels),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn channels(&self) -> usize {
        self.w_q.cols()
    }
}

/// Channel-preserving 3x3 convolution followed by rectification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineBlock {
    pub kernel: Kernel3x3,
    pub bias: Vec<f64>,
}

impl RefineBlock {
    pub fn new(kernel: Kernel3x3, bias: Vec<f64>) -> Result<Self> {
        if kernel.c_in() != kernel.c_out() {
            return Err(Error::shape(format!(
                "refine block must preserve channels, got {} -> {}",
                kernel.c_in(),
                kernel.c_out()
            )));
        }
        if bias.len() != kernel.c_out() {
            return Err(Error::shape("refine bias length"));
        }
        Ok(Self { kernel, bias })
    }

    /// Pass-through block: delta kernel, zero bias.
    pub fn identity(channels: usize) -> Self {
        Self {
            kernel: Kernel3x3::delta(channels),
            bias: vec![0.0; channels],
        }
    }
}

fn project(f: &FeatureMap, w: &Matrix) -> Result<Matrix> {
    let bias = vec![0.0; w.rows()];
    Ok(conv1x1(f, w, &bias)?.to_pixel_matrix())
}

fn row_softmax_in_place(m: &mut Matrix) {
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = &mut m.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn correlation_parts(f_non: &FeatureMap, f_dom: &FeatureMap, proj: &QKProjection) -> Result<(Matrix, Matrix, Matrix)> {
    f_non.ensure_same_shape(f_dom, "correlation inputs")?;
    if proj.channels() != f_non.channels() {
        return Err(Error::shape(format!(
            "projection expects {} channels, feature has {}",
            proj.channels(),
            f_non.channels()
        )));
    }
    let q = project(f_non, &proj.w_q)?;
    let k = project(f_dom, &proj.w_k)?;
    let mut logits = matmul(&q, &k.transpose())?;
    let inv = 1.0 / (proj.dim() as f64).sqrt();
    logits.data_mut().iter_mut().for_each(|v| *v *= inv);
    row_softmax_in_place(&mut logits);
    Ok((q, k, logits))
}

/// `Corr = softmax_rows(Q K^T / sqrt(d))` with `Q` from the non-dominant and
/// `K` from the dominant feature.
pub fn correlation(f_non: &FeatureMap, f_dom: &FeatureMap, proj: &QKProjection) -> Result<Matrix> {
    correlation_parts(f_non, f_dom, proj).map(|(_, _, c)| c)
}

/// `Corr * F_non`, with the feature viewed as `[HW, C]`.
pub fn reproject(corr: &Matrix, f_non: &FeatureMap) -> Result<FeatureMap> {
    let n = f_non.pixels();
    if corr.shape() != (n, n) {
        return Err(Error::shape(format!(
            "correlation {:?} against {} pixels",
            corr.shape(),
            n
        )));
    }
    for r in 0..n {
        let s: f64 = corr.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_STOCHASTIC_TOL || corr.row(r).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "correlation row {r} is not stochastic (sum {s})"
            )));
        }
    }
    let out = matmul(corr, &f_non.to_pixel_matrix())?;
    FeatureMap::from_pixel_matrix(&out, f_non.height(), f_non.width())
}

/// `max(0, conv3x3(F_non + F_reproj))`.
pub fn refine(f_non: &FeatureMap, f_reproj: &FeatureMap, block: &RefineBlock) -> Result<FeatureMap> {
    let sum = f_non.add(f_reproj)?;
    Ok(conv3x3(&sum, &block.kernel, &block.bias)?.map(|v| v.max(0.0)))
}

/// Gradients of a loss through `reproject`: `(dCorr, dF_non)`.
pub fn reproject_backward(corr: &Matrix, f_non: &FeatureMap, grad_out: &FeatureMap) -> Result<(Matrix, FeatureMap)> {
    f_non.ensure_same_shape(grad_out, "reproject backward")?;
    let g = grad_out.to_pixel_matrix();
    let d_corr = matmul(&g, &f_non.to_pixel_matrix().transpose())?;
    let d_x = matmul(&corr.transpose(), &g)?;
    Ok((d_corr, FeatureMap::from_pixel_matrix(&d_x, f_non.height(), f_non.width())?))
}

/// Gradients of a loss through `correlation`: `(dF_non, dF_dom, dW_q, dW_k)`.
pub fn correlation_backward(
    f_non: &FeatureMap,
    f_dom: &FeatureMap,
    proj: &QKProjection,
    grad_corr: &Matrix,
) -> Result<(FeatureMap, FeatureMap, Matrix, Matrix)> {
    let (q, k, corr) = correlation_parts(f_non, f_dom, proj)?;
    correlation_backward_cached(f_non, f_dom, proj, &q, &k, &corr, grad_corr)
}

fn correlation_backward_cached(
    f_non: &FeatureMap,
    f_dom: &FeatureMap,
    proj: &QKProjection,
    q: &Matrix,
    k: &Matrix,
    corr: &Matrix,
    grad_corr: &Matrix,
) -> Result<(FeatureMap, FeatureMap, Matrix, Matrix)> {
    if grad_corr.shape() != corr.shape() {
        return Err(Error::shape("correlation gradient shape"));
    }
    let n = corr.rows();
    let inv = 1.0 / (proj.dim() as f64).sqrt();
    // Softmax Jacobian, row by row, folded with the 1/sqrt(d) scale.
    let mut d_logits = Matrix::zeros(n, n);
    for r in 0..n {
        let c = corr.row(r);
        let g = grad_corr.row(r);
        let dot: f64 = c.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..n {
            d_logits.set(r, j, c[j] * (g[j] - dot) * inv);
        }
    }
    let d_q = matmul(&d_logits, k)?;
    let d_k = matmul(&d_logits.transpose(), q)?;
    let (h, w) = (f_non.height(), f_non.width());
    let gq = conv1x1_backward(f_non, &proj.w_q, &FeatureMap::from_pixel_matrix(&d_q, h, w)?)?;
    let gk = conv1x1_backward(f_dom, &proj.w_k, &FeatureMap::from_pixel_matrix(&d_k, h, w)?)?;
    let (d, c) = proj.w_q.shape();
    Ok((gq.input, gk.input, Matrix::new(d, c, gq.weights)?, Matrix::new(d, c, gk.weights)?))
}

/// Every intermediate of the low-level path, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LowLevelCache {
    pub f_non: FeatureMap,
    pub f_dom: FeatureMap,
    pub q: Matrix,
    pub k: Matrix,
    pub corr: Matrix,
    pub reproj: FeatureMap,
    pub summed: FeatureMap,
    pub pre_activation: FeatureMap,
    pub output: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct LowLevelGrads {
    pub f_non: FeatureMap,
    pub f_dom: FeatureMap,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LowLevelCache {
    /// Correlation, reprojection and refinement in one pass.
    pub fn forward(f_non: &FeatureMap, f_dom: &FeatureMap, proj: &QKProjection, block: &RefineBlock) -> Result<Self> {
        let (q, k, corr) = correlation_parts(f_non, f_dom, proj)?;
        let reproj = reproject(&corr, f_non)?;
        let summed = f_non.add(&reproj)?;
        let pre_activation = conv3x3(&summed, &block.kernel, &block.bias)?;
        let output = pre_activation.map(|v| v.max(0.0));
        Ok(Self {
            f_non: f_non.clone(),
            f_dom: f_dom.clone(),
            q,
            k,
            corr,
            reproj,
            summed,
            pre_activation,
            output,
        })
    }

    pub fn backward(&self, proj: &QKProjection, block: &RefineBlock, grad_out: &FeatureMap) -> Result<LowLevelGrads> {
        self.output.ensure_same_shape(grad_out, "low-level backward")?;
        let d_pre = self
            .pre_activation
            .zip_map(grad_out, |p, g| if p > 0.0 { g } else { 0.0 });
        let conv = conv3x3_backward(&self.summed, &block.kernel, &d_pre)?;
        let d_sum = conv.input;
        // Residual branch and reprojection branch both receive d_sum.
        let (d_corr, d_non_reproj) = reproject_backward(&self.corr, &self.f_non, &d_sum)?;
        let (d_non_q, d_dom, w_q, w_k) =
            correlation_backward_cached(&self.f_non, &self.f_dom, proj, &self.q, &self.k, &self.corr, &d_corr)?;
        let mut f_non = d_sum;
        f_non.add_scaled(&d_non_reproj, 1.0);
        f_non.add_scaled(&d_non_q, 1.0);
        Ok(LowLevelGrads {
            f_non,
            f_dom: d_dom,
            w_q,
            w_k,
            kernel: conv.weights,
            bias: conv.bias,
        })
    }
}
