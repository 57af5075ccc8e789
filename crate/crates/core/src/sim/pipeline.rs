//! Forward pass with an activation cache and the matching manual backward pass.
//!
//! Quantities that are treated as constants during differentiation (the
//! dominance scores and roles, the distillation teacher and scale, and the
//! features seen by the auxiliary detectors when their loss is not part of
//! the objective) are collected in [`Detached`]. Re-running the forward pass
//! with them frozen gives a loss whose exact gradient is what
//! [`backward`] returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fusion_coefficients, fuse_with_role, WeightingStrategy};
use crate::hcg::{da_included_pixels, loss_distill, loss_distill_with_scale, DistillResult, LowLevelCache};
use crate::mdi::{
    aux_loss, aux_loss_grad, aux_loss_param_grad, diversity, dominant, mdi_scores, sigmoid,
    DominanceScores, GroundTruthMask, Modality,
};
use crate::tensor::{conv1x1, conv1x1_backward, conv3x3, conv3x3_backward, FeatureMap, Kernel3x3};

use super::config::RunConfig;
use super::data::SyntheticSample;
use super::model::{ConvLayer, Encoder, ToyModel};

#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub input: FeatureMap,
    pub act1: FeatureMap,
    pub output: FeatureMap,
}

pub fn encoder_forward(enc: &Encoder, input: &FeatureMap) -> Result<EncoderCache> {
    let act1 = conv3x3(input, &enc.stage1.kernel, &enc.stage1.bias)?.map(f64::tanh);
    let output = conv3x3(&act1, &enc.stage2.kernel, &enc.stage2.bias)?;
    Ok(EncoderCache {
        input: input.clone(),
        act1,
        output,
    })
}

/// Parameter gradient of an encoder given the gradient on its output.
pub fn encoder_backward(enc: &Encoder, cache: &EncoderCache, grad_out: &FeatureMap) -> Result<Encoder> {
    let g2 = conv3x3_backward(&cache.act1, &enc.stage2.kernel, grad_out)?;
    let d_pre1 = g2.input.zip_map(&cache.act1, |g, a| g * (1.0 - a * a));
    let g1 = conv3x3_backward(&cache.input, &enc.stage1.kernel, &d_pre1)?;
    let k = &enc.stage2.kernel;
    let k1 = &enc.stage1.kernel;
    Ok(Encoder {
        stage1: ConvLayer {
            kernel: Kernel3x3::new(k1.c_out(), k1.c_in(), g1.weights)?,
            bias: g1.bias,
        },
        stage2: ConvLayer {
            kernel: Kernel3x3::new(k.c_out(), k.c_in(), g2.weights)?,
            bias: g2.bias,
        },
    })
}

/// Values held constant when differentiating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detached {
    pub scores: DominanceScores,
    pub dom: Modality,
    pub teacher: Option<FeatureMap>,
    pub distill_scale: Option<f64>,
    /// Whether the direction-alignment term could be evaluated.
    pub da_active: bool,
    /// Features the auxiliary detectors were fitted on, when cut from the encoders.
    pub aux_features: Option<(FeatureMap, FeatureMap)>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    pub branch_a: EncoderCache,
    pub branch_b: EncoderCache,
    pub detached: Detached,
    pub strategy: WeightingStrategy,
    pub low: Option<LowLevelCache>,
    pub f_non_refined: FeatureMap,
    /// Fusion coefficients on `(F_dom, F'_non)`.
    pub coefs: (f64, f64),
    pub fused: FeatureMap,
    pub logits: Vec<f64>,
    pub prediction: Vec<f64>,
    pub gt: GroundTruthMask,
    pub task_loss: f64,
    pub distill: Option<DistillResult>,
    pub aux_losses: (f64, f64),
    /// Object-region feature entropy of each branch.
    pub entropy: (f64, f64),
}

impl ForwardCache {
    pub fn distill_loss(&self) -> f64 {
        self.distill.as_ref().map_or(0.0, |d| d.loss)
    }

    /// The differentiated objective.
    pub fn total_loss(&self, run: &RunConfig) -> f64 {
        self.task_loss + self.distill_loss() + run.aux_weight * (self.aux_losses.0 + self.aux_losses.1)
    }

    pub fn branch(&self, m: Modality) -> &EncoderCache {
        match m {
            Modality::Rgb => &self.branch_a,
            Modality::Ir => &self.branch_b,
        }
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `gt`.
pub fn bce_with_logits(logits: &[f64], gt: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(gt)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

fn object_entropy(f: &FeatureMap, gt: &GroundTruthMask) -> Result<f64> {
    if gt.data().iter().any(|&v| v > 0.5) {
        diversity(f, Some(gt))
    } else {
        diversity(f, None)
    }
}

pub fn forward(model: &ToyModel, sample: &SyntheticSample, run: &RunConfig) -> Result<ForwardCache> {
    forward_impl(model, sample, run, None, None)
}

/// Forward pass with externally supplied dominance scores.
pub fn forward_with_scores(
    model: &ToyModel,
    sample: &SyntheticSample,
    run: &RunConfig,
    scores: DominanceScores,
) -> Result<ForwardCache> {
    forward_impl(model, sample, run, Some(scores), None)
}

/// Forward pass with every detached quantity taken from `frozen`.
pub fn forward_frozen(
    model: &ToyModel,
    sample: &SyntheticSample,
    run: &RunConfig,
    frozen: &Detached,
) -> Result<ForwardCache> {
    forward_impl(model, sample, run, None, Some(frozen))
}

fn forward_impl(
    model: &ToyModel,
    sample: &SyntheticSample,
    run: &RunConfig,
    scores_override: Option<DominanceScores>,
    frozen: Option<&Detached>,
) -> Result<ForwardCache> {
    let gt = &sample.gt;
    let branch_a = encoder_forward(&model.enc_a, &sample.mod_a)?;
    let branch_b = encoder_forward(&model.enc_b, &sample.mod_b)?;
    let (f_a, f_b) = (&branch_a.output, &branch_b.output);

    let (scores, dom) = match (frozen, scores_override) {
        (Some(fz), _) => (fz.scores, fz.dom),
        (None, Some(s)) => (s, dominant(&s)),
        (None, None) => {
            let s = if run.enable_mdi {
                mdi_scores(f_a, f_b, &model.aux_a, &model.aux_b, gt, run.delta)?
            } else {
                DominanceScores::balanced(run.delta)
            };
            (s, dominant(&s))
        }
    };
    let (f_dom, f_non) = match dom {
        Modality::Rgb => (f_a, f_b),
        Modality::Ir => (f_b, f_a),
    };

    let low = if run.enable_hcg_low {
        Some(LowLevelCache::forward(f_non, f_dom, &model.qk, &model.refine)?)
    } else {
        None
    };
    let f_non_refined = low.as_ref().map_or_else(|| f_non.clone(), |l| l.output.clone());

    let strategy = run.effective_strategy();
    let coefs = fusion_coefficients(&scores, dom, strategy)?;
    let fused = fuse_with_role(f_dom, &f_non_refined, &scores, dom, strategy)?;
    let logits = conv1x1(&fused, &model.head.weights, &[model.head.bias])?.into_data();
    let prediction: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let task_loss = bce_with_logits(&logits, gt.data());

    let mut teacher = None;
    let mut distill_scale = None;
    let mut da_active = false;
    let mut distill = None;
    if run.enable_hcg_high {
        let t = match frozen.and_then(|fz| fz.teacher.as_ref()) {
            Some(t) => t.clone(),
            None => f_dom.clone(),
        };
        da_active = match frozen {
            Some(fz) => fz.da_active,
            None => da_included_pixels(&f_non_refined, &t)? > 0,
        };
        let mut w = run.distill_weights();
        if !da_active {
            w.beta = 0.0;
        }
        if w.alpha > 0.0 || w.beta > 0.0 || w.gamma > 0.0 {
            let res = match frozen.and_then(|fz| fz.distill_scale) {
                Some(scale) => loss_distill_with_scale(&f_non_refined, &t, &w, scale)?,
                None => loss_distill(&f_non_refined, &t, &w)?,
            };
            distill_scale = Some(res.components.scale);
            distill = Some(res);
        }
        teacher = Some(t);
    }

    let aux_features = match frozen {
        Some(fz) => fz.aux_features.clone(),
        None if run.aux_in_objective => None,
        None => Some((f_a.clone(), f_b.clone())),
    };
    let (aux_in_a, aux_in_b) = match &aux_features {
        Some((a, b)) => (a, b),
        None => (f_a, f_b),
    };
    let aux_losses = if run.aux_weight > 0.0 {
        (aux_loss(aux_in_a, &model.aux_a, gt)?, aux_loss(aux_in_b, &model.aux_b, gt)?)
    } else {
        (0.0, 0.0)
    };
    let entropy = (object_entropy(f_a, gt)?, object_entropy(f_b, gt)?);

    Ok(ForwardCache {
        fingerprint: model.fingerprint(),
        detached: Detached {
            scores,
            dom,
            teacher,
            distill_scale,
            da_active,
            aux_features,
        },
        branch_a,
        branch_b,
        strategy,
        low,
        f_non_refined,
        coefs,
        fused,
        logits,
        prediction,
        gt: gt.clone(),
        task_loss,
        distill,
        aux_losses,
        entropy,
    })
}

/// Gradients of one forward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Gradient of the total objective, branch A already multiplied by lambda.
    pub total: ToyModel,
    /// Task-loss-only encoder gradients, branch A multiplied by lambda.
    pub task_enc_a: Encoder,
    pub task_enc_b: Encoder,
    /// Task-loss gradient with respect to each encoder's output feature.
    pub task_feature_a: FeatureMap,
    pub task_feature_b: FeatureMap,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Pushes gradients on `(F_dom, F'_non)` back to `(F_a, F_b)`, accumulating
/// the low-level path's parameter gradients into `grads`.
fn route_to_branches(
    model: &ToyModel,
    cache: &ForwardCache,
    d_dom: FeatureMap,
    d_non_refined: &FeatureMap,
    grads: &mut ToyModel,
) -> Result<(FeatureMap, FeatureMap)> {
    let (d_dom, d_non) = match &cache.low {
        Some(low) => {
            let lg = low.backward(&model.qk, &model.refine, d_non_refined)?;
            add_into(grads.qk.w_q.data_mut(), lg.w_q.data());
            add_into(grads.qk.w_k.data_mut(), lg.w_k.data());
            add_into(grads.refine.kernel.data_mut(), &lg.kernel);
            add_into(&mut grads.refine.bias, &lg.bias);
            let mut d = d_dom;
            d.add_scaled(&lg.f_dom, 1.0);
            (d, lg.f_non)
        }
        None => (d_dom, d_non_refined.clone()),
    };
    Ok(match cache.detached.dom {
        Modality::Rgb => (d_dom, d_non),
        Modality::Ir => (d_non, d_dom),
    })
}

pub fn backward(model: &ToyModel, cache: &ForwardCache, run: &RunConfig) -> Result<Gradients> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::InvalidState(
            "activation cache was produced by different model parameters".into(),
        ));
    }
    let mut grads = model.zeros_like();
    let (_, h, w) = cache.fused.shape();
    let n = (h * w) as f64;
    let d_logits: Vec<f64> = cache
        .prediction
        .iter()
        .zip(cache.gt.data())
        .map(|(p, y)| (p - y) / n)
        .collect();
    let d_logits = FeatureMap::new(1, h, w, d_logits)?;
    let head = conv1x1_backward(&cache.fused, &model.head.weights, &d_logits)?;
    grads.head.weights.data_mut().copy_from_slice(&head.weights);
    grads.head.bias = head.bias[0];

    let (c_dom, c_non) = cache.coefs;
    let d_fused = head.input;
    let (task_fa, task_fb) = route_to_branches(
        model,
        cache,
        d_fused.scale(c_dom),
        &d_fused.scale(c_non),
        &mut grads,
    )?;

    let mut extra_a = None;
    let mut extra_b = None;
    if let Some(d) = &cache.distill {
        let zero = d.grad_student.zeros_like();
        let (xa, xb) = route_to_branches(model, cache, zero, &d.grad_student, &mut grads)?;
        extra_a = Some(xa);
        extra_b = Some(xb);
    }

    if run.aux_weight > 0.0 {
        let (fa, fb) = match &cache.detached.aux_features {
            Some((a, b)) => (a, b),
            None => (&cache.branch_a.output, &cache.branch_b.output),
        };
        for (m, f) in [(Modality::Rgb, fa), (Modality::Ir, fb)] {
            let det = model.aux(m);
            let (gw, gb) = aux_loss_param_grad(f, det, &cache.gt)?;
            let slot = match m {
                Modality::Rgb => &mut grads.aux_a,
                Modality::Ir => &mut grads.aux_b,
            };
            for (s, g) in slot.weights.data_mut().iter_mut().zip(&gw) {
                *s = run.aux_weight * g;
            }
            slot.bias = run.aux_weight * gb;
            if cache.detached.aux_features.is_none() {
                let g = aux_loss_grad(f, det, &cache.gt)?;
                let extra = match m {
                    Modality::Rgb => &mut extra_a,
                    Modality::Ir => &mut extra_b,
                };
                match extra {
                    Some(e) => e.add_scaled(&g, run.aux_weight),
                    None => *extra = Some(g.scale(run.aux_weight)),
                }
            }
        }
    }

    let mut task_enc_a = encoder_backward(&model.enc_a, &cache.branch_a, &task_fa)?;
    let task_enc_b = encoder_backward(&model.enc_b, &cache.branch_b, &task_fb)?;
    grads.enc_a = task_enc_a.clone();
    grads.enc_b = task_enc_b.clone();
    if let Some(x) = &extra_a {
        grads.enc_a.add_scaled(&encoder_backward(&model.enc_a, &cache.branch_a, x)?, 1.0);
    }
    if let Some(x) = &extra_b {
        grads.enc_b.add_scaled(&encoder_backward(&model.enc_b, &cache.branch_b, x)?, 1.0);
    }

    let lambda = run.grad_boost_lambda;
    if lambda != 1.0 {
        grads.enc_a.scale(lambda);
        task_enc_a.scale(lambda);
    }
    Ok(Gradients {
        total: grads,
        task_enc_a,
        task_enc_b,
        task_feature_a: task_fa,
        task_feature_b: task_fb,
    })
}
