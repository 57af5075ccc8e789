use serde::{Deserialize, Serialize};

use super::{FeatureMap, Matrix};
use crate::error::{Error, Result};

/// Dense 3x3 convolution kernel laid out as `[C_out, C_in, 3, 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel3x3 {
    c_out: usize,
    c_in: usize,
    data: Vec<f64>,
}

impl Kernel3x3 {
    pub fn new(c_out: usize, c_in: usize, data: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(Error::invalid("kernel channel counts must be positive"));
        }
        if data.len() != c_out * c_in * 9 {
            return Err(Error::shape(format!(
                "kernel data length {} does not match ({c_out}, {c_in}, 3, 3)",
                data.len()
            )));
        }
        Ok(Self { c_out, c_in, data })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        assert!(c_out > 0 && c_in > 0);
        Self {
            c_out,
            c_in,
            data: vec![0.0; c_out * c_in * 9],
        }
    }

    /// Centre tap 1 on the channel diagonal; passes its input through unchanged.
    pub fn delta(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels);
        for c in 0..channels {
            let i = k.index(c, c, 1, 1);
            k.data[i] = 1.0;
        }
        k
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * 3 + ky) * 3 + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: FeatureMap,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-pixel linear map: `out[:, p] = weights * in[:, p] + bias`.
pub fn conv1x1(f: &FeatureMap, weights: &Matrix, bias: &[f64]) -> Result<FeatureMap> {
    if weights.cols() != f.channels() {
        return Err(Error::shape(format!(
            "conv1x1 weights {}x{} against {} input channels",
            weights.rows(),
            weights.cols(),
            f.channels()
        )));
    }
    if bias.len() != weights.rows() {
        return Err(Error::shape(format!(
            "conv1x1 bias length {} for {} output channels",
            bias.len(),
            weights.rows()
        )));
    }
    let (c_out, c_in, n) = (weights.rows(), f.channels(), f.pixels());
    let mut out = FeatureMap::zeros(c_out, f.height(), f.width());
    let (x, w) = (f.data(), weights.data());
    let od = out.data_mut();
    for o in 0..c_out {
        for p in 0..n {
            let mut acc = 0.0;
            for i in 0..c_in {
                acc += w[o * c_in + i] * x[i * n + p];
            }
            od[o * n + p] = acc + bias[o];
        }
    }
    Ok(out)
}

pub fn conv1x1_backward(f: &FeatureMap, weights: &Matrix, grad_out: &FeatureMap) -> Result<ConvGrads> {
    if weights.cols() != f.channels()
        || grad_out.channels() != weights.rows()
        || grad_out.height() != f.height()
        || grad_out.width() != f.width()
    {
        return Err(Error::shape(format!(
            "conv1x1 backward: input {:?}, weights {:?}, grad {:?}",
            f.shape(),
            weights.shape(),
            grad_out.shape()
        )));
    }
    let (c_out, c_in, n) = (weights.rows(), f.channels(), f.pixels());
    let mut gin = f.zeros_like();
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    let (x, w, g) = (f.data(), weights.data(), grad_out.data());
    let gi = gin.data_mut();
    for o in 0..c_out {
        for p in 0..n {
            let go = g[o * n + p];
            gb[o] += go;
            for i in 0..c_in {
                gw[o * c_in + i] += go * x[i * n + p];
                gi[i * n + p] += go * w[o * c_in + i];
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}

fn check_conv3x3(f: &FeatureMap, kernel: &Kernel3x3, bias: &[f64]) -> Result<()> {
    if kernel.c_in != f.channels() {
        return Err(Error::shape(format!(
            "conv3x3 kernel expects {} input channels, got {}",
            kernel.c_in,
            f.channels()
        )));
    }
    if bias.len() != kernel.c_out {
        return Err(Error::shape(format!(
            "conv3x3 bias length {} for {} output channels",
            bias.len(),
            kernel.c_out
        )));
    }
    Ok(())
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv3x3(f: &FeatureMap, kernel: &Kernel3x3, bias: &[f64]) -> Result<FeatureMap> {
    check_conv3x3(f, kernel, bias)?;
    let (c_in, h, w) = f.shape();
    let mut out = FeatureMap::zeros(kernel.c_out, h, w);
    for o in 0..kernel.c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..3 {
                        let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                                continue;
                            };
                            acc += kernel.get(o, i, ky, kx) * f.get(i, iy, ix);
                        }
                    }
                }
                out.set(o, y, x, acc + bias[o]);
            }
        }
    }
    Ok(out)
}

pub fn conv3x3_backward(f: &FeatureMap, kernel: &Kernel3x3, grad_out: &FeatureMap) -> Result<ConvGrads> {
    if kernel.c_in != f.channels()
        || grad_out.channels() != kernel.c_out
        || grad_out.height() != f.height()
        || grad_out.width() != f.width()
    {
        return Err(Error::shape(format!(
            "conv3x3 backward: input {:?}, kernel ({}, {}), grad {:?}",
            f.shape(),
            kernel.c_out,
            kernel.c_in,
            grad_out.shape()
        )));
    }
    let (c_in, h, w) = f.shape();
    let mut gin = f.zeros_like();
    let mut gw = vec![0.0; kernel.data.len()];
    let mut gb = vec![0.0; kernel.c_out];
    for o in 0..kernel.c_out {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out.get(o, y, x);
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for i in 0..c_in {
                    for ky in 0..3 {
                        let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                                continue;
                            };
                            let k = kernel.index(o, i, ky, kx);
                            gw[k] += g * f.get(i, iy, ix);
                            let j = gin.index(i, iy, ix);
                            gin.data_mut()[j] += g * kernel.data[k];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}
