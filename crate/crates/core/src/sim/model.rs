//! Two-branch toy detector with a flat parameter view.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hcg::{QKProjection, RefineBlock};
use crate::mdi::{AuxDetector, DominanceScores, Modality, DEFAULT_DELTA};
use crate::tensor::{Kernel3x3, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub channels: usize,
    pub qk_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            qk_dim: 2,
        }
    }
}

impl ModelSpec {
    /// Small enough for an end-to-end finite-difference sweep.
    pub fn tiny() -> Self {
        Self {
            channels: 2,
            qk_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.qk_dim == 0 || self.qk_dim > self.channels {
            return Err(Error::invalid(format!(
                "need channels >= qk_dim >= 1, got channels={} qk_dim={}",
                self.channels, self.qk_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: Kernel3x3,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            kernel: Kernel3x3::zeros(c_out, c_in),
            bias: vec![0.0; c_out],
        }
    }

    fn uniform(rng: &mut SplitMix64, c_out: usize, c_in: usize) -> Self {
        let mut layer = Self::zeros(c_out, c_in);
        let a = (3.0 / (9 * c_in) as f64).sqrt();
        for v in layer.kernel.data_mut() {
            *v = rng.random_range(-a..a);
        }
        layer
    }
}

/// `conv3x3 -> tanh -> conv3x3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub stage1: ConvLayer,
    pub stage2: ConvLayer,
}

impl Encoder {
    fn zeros(channels: usize) -> Self {
        Self {
            stage1: ConvLayer::zeros(channels, 1),
            stage2: ConvLayer::zeros(channels, channels),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.stage1.kernel.data(),
            &self.stage1.bias,
            self.stage2.kernel.data(),
            &self.stage2.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.stage1.kernel.data_mut(),
            &mut self.stage1.bias,
            self.stage2.kernel.data_mut(),
            &mut self.stage2.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Encoder, k: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-pixel linear map `C -> 1` producing a logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Matrix,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub enc_a: Encoder,
    pub enc_b: Encoder,
    pub qk: QKProjection,
    pub refine: RefineBlock,
    pub aux_a: AuxDetector,
    pub aux_b: AuxDetector,
    pub head: Head,
    /// Dominance scores used at inference time, when no ground truth exists.
    pub inference_scores: DominanceScores,
}

impl ToyModel {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        Ok(Self {
            spec,
            enc_a: Encoder::zeros(c),
            enc_b: Encoder::zeros(c),
            qk: QKProjection::zeros(spec.qk_dim, c),
            refine: RefineBlock {
                kernel: Kernel3x3::zeros(c, c),
                bias: vec![0.0; c],
            },
            aux_a: AuxDetector::zeros(c),
            aux_b: AuxDetector::zeros(c),
            head: Head {
                weights: Matrix::zeros(1, c),
                bias: 0.0,
            },
            inference_scores: DominanceScores::balanced(DEFAULT_DELTA),
        })
    }

    /// Seeded initialisation. With `mirrored`, branch B is an exact copy of branch A.
    pub fn init(spec: ModelSpec, seed: u64, mirrored: bool) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let c = spec.channels;
        let mut rng = SplitMix64::seed_from_u64(seed);
        m.enc_a = Encoder {
            stage1: ConvLayer::uniform(&mut rng, c, 1),
            stage2: ConvLayer::uniform(&mut rng, c, c),
        };
        m.enc_b = if mirrored {
            m.enc_a.clone()
        } else {
            Encoder {
                stage1: ConvLayer::uniform(&mut rng, c, 1),
                stage2: ConvLayer::uniform(&mut rng, c, c),
            }
        };
        let a = (1.0 / c as f64).sqrt();
        for v in m.qk.w_q.data_mut().iter_mut().chain(m.qk.w_k.data_mut()) {
            *v = rng.random_range(-a..a);
        }
        m.refine = RefineBlock::identity(c);
        for v in m.refine.kernel.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        for v in m.aux_a.weights.data_mut() {
            *v = rng.random_range(-a..a);
        }
        m.aux_b = if mirrored {
            m.aux_a.clone()
        } else {
            let mut g = AuxDetector::zeros(c);
            for v in g.weights.data_mut() {
                *v = rng.random_range(-a..a);
            }
            g
        };
        for v in m.head.weights.data_mut() {
            *v = rng.random_range(-a..a);
        }
        Ok(m)
    }

    /// Zeroed copy with the same shapes, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(17);
        out.extend(self.enc_a.tensors());
        out.extend(self.enc_b.tensors());
        out.push(self.qk.w_q.data());
        out.push(self.qk.w_k.data());
        out.push(self.refine.kernel.data());
        out.push(&self.refine.bias);
        out.push(self.aux_a.weights.data());
        out.push(std::slice::from_ref(&self.aux_a.bias));
        out.push(self.aux_b.weights.data());
        out.push(std::slice::from_ref(&self.aux_b.bias));
        out.push(self.head.weights.data());
        out.push(std::slice::from_ref(&self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(17);
        out.extend(self.enc_a.tensors_mut());
        out.extend(self.enc_b.tensors_mut());
        out.push(self.qk.w_q.data_mut());
        out.push(self.qk.w_k.data_mut());
        out.push(self.refine.kernel.data_mut());
        out.push(&mut self.refine.bias);
        out.push(self.aux_a.weights.data_mut());
        out.push(std::slice::from_mut(&mut self.aux_a.bias));
        out.push(self.aux_b.weights.data_mut());
        out.push(std::slice::from_mut(&mut self.aux_b.bias));
        out.push(self.head.weights.data_mut());
        out.push(std::slice::from_mut(&mut self.head.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape(format!("expected {n} parameters, got {}", flat.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ToyModel, k: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Rgb => &self.enc_a,
            Modality::Ir => &self.enc_b,
        }
    }

    pub fn encoder_mut(&mut self, m: Modality) -> &mut Encoder {
        match m {
            Modality::Rgb => &mut self.enc_a,
            Modality::Ir => &mut self.enc_b,
        }
    }

    pub fn aux(&self, m: Modality) -> &AuxDetector {
        match m {
            Modality::Rgb => &self.aux_a,
            Modality::Ir => &self.aux_b,
        }
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for t in self.tensors() {
            for v in t {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
