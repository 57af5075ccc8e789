use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdi::{dominant, mdi_scores, DominanceScores};
use crate::tensor::FeatureMap;

use super::config::RunConfig;
use super::data::{derive_seed, gen_sample, GeneratorConfig, SyntheticSample};
use super::model::ToyModel;
use super::pipeline::{backward, encoder_forward, forward, forward_with_scores};

/// Supplies the training batch for each step.
pub trait SampleSource: Sync {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<SyntheticSample>>;
}

/// Fresh generated samples every step.
#[derive(Clone, Debug)]
pub struct SyntheticStream {
    pub generator: GeneratorConfig,
    pub seed: u64,
}

impl SampleSource for SyntheticStream {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<SyntheticSample>> {
        (0..size)
            .map(|i| gen_sample(&self.generator, derive_seed(&[self.seed, step as u64, i as u64])))
            .collect()
    }
}

/// Cycles through a fixed list.
#[derive(Clone, Debug)]
pub struct FixedSamples(pub Vec<SyntheticSample>);

impl SampleSource for FixedSamples {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<SyntheticSample>> {
        if self.0.is_empty() {
            return Err(Error::invalid("sample list is empty"));
        }
        Ok((0..size).map(|i| self.0[(step * size + i) % self.0.len()].clone()).collect())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub grad_a: f64,
    pub grad_b: f64,
    pub s_a: f64,
    pub s_b: f64,
    pub entropy_a: f64,
    pub entropy_b: f64,
}

/// Norms of the task-loss gradient on each encoder's output feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGradRecord {
    pub step: usize,
    pub feature_grad_a: f64,
    pub feature_grad_b: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub feature_grads: Vec<FeatureGradRecord>,
    pub model: ToyModel,
}

fn raw_scores(model: &ToyModel, sample: &SyntheticSample, run: &RunConfig) -> Result<DominanceScores> {
    let fa = encoder_forward(&model.enc_a, &sample.mod_a)?.output;
    let fb = encoder_forward(&model.enc_b, &sample.mod_b)?.output;
    mdi_scores(&fa, &fb, &model.aux_a, &model.aux_b, &sample.gt, run.delta)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Gradient descent over `run.steps` batches.
///
/// `observer` sees every record as soon as it is produced.
pub fn train(
    mut model: ToyModel,
    source: &dyn SampleSource,
    run: &RunConfig,
    mut observer: impl FnMut(&StepRecord, &FeatureGradRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let mut records = Vec::with_capacity(run.steps);
    let mut feature_grads = Vec::with_capacity(run.steps);
    let mut velocity = model.zeros_like();
    let mut ema: Option<DominanceScores> = None;
    let bs = run.batch_size as f64;

    for step in 0..run.steps {
        let batch = source.batch(step, run.batch_size)?;
        let mut grads = model.zeros_like();
        let mut task_a = model.zeros_like().enc_a;
        let mut task_b = task_a.clone();
        let mut feat_a: Option<FeatureMap> = None;
        let mut feat_b: Option<FeatureMap> = None;
        let mut rec = StepRecord {
            step,
            task_loss: 0.0,
            distill_loss: 0.0,
            grad_a: 0.0,
            grad_b: 0.0,
            s_a: 0.0,
            s_b: 0.0,
            entropy_a: 0.0,
            entropy_b: 0.0,
        };
        let diverged = |e: Error| match e {
            Error::Numeric(detail) => Error::Divergence { step, detail },
            other => other,
        };
        for sample in &batch {
            let cache = if run.enable_mdi && run.score_ema > 0.0 {
                let raw = raw_scores(&model, sample, run).map_err(diverged)?;
                let m = run.score_ema;
                let s = match ema {
                    None => raw,
                    Some(prev) => DominanceScores {
                        s_rgb: m * prev.s_rgb + (1.0 - m) * raw.s_rgb,
                        s_ir: m * prev.s_ir + (1.0 - m) * raw.s_ir,
                        delta: raw.delta,
                    },
                };
                ema = Some(s);
                forward_with_scores(&model, sample, run, s).map_err(diverged)?
            } else {
                forward(&model, sample, run).map_err(diverged)?
            };
            let g = backward(&model, &cache, run).map_err(diverged)?;
            grads.add_scaled(&g.total, 1.0 / bs);
            task_a.add_scaled(&g.task_enc_a, 1.0 / bs);
            task_b.add_scaled(&g.task_enc_b, 1.0 / bs);
            for (acc, f) in [(&mut feat_a, &g.task_feature_a), (&mut feat_b, &g.task_feature_b)] {
                match acc {
                    Some(a) => a.add_scaled(f, 1.0 / bs),
                    None => *acc = Some(f.scale(1.0 / bs)),
                }
            }
            rec.task_loss += cache.task_loss / bs;
            rec.distill_loss += cache.distill_loss() / bs;
            rec.s_a += cache.detached.scores.s_rgb / bs;
            rec.s_b += cache.detached.scores.s_ir / bs;
            rec.entropy_a += cache.entropy.0 / bs;
            rec.entropy_b += cache.entropy.1 / bs;
        }
        rec.grad_a = task_a.norm();
        rec.grad_b = task_b.norm();
        check_finite(step, "task loss", rec.task_loss)?;
        check_finite(step, "distill loss", rec.distill_loss)?;
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameter gradient".into(),
            });
        }
        let fg = FeatureGradRecord {
            step,
            feature_grad_a: feat_a.map_or(0.0, |f| crate::tensor::frobenius_norm(&f)),
            feature_grad_b: feat_b.map_or(0.0, |f| crate::tensor::frobenius_norm(&f)),
        };
        observer(&rec, &fg)?;
        records.push(rec);
        feature_grads.push(fg);

        if run.momentum == 0.0 && run.weight_decay == 0.0 {
            model.add_scaled(&grads, -run.lr);
        } else {
            velocity.scale(run.momentum);
            velocity.add_scaled(&grads, 1.0);
            velocity.add_scaled(&model, run.weight_decay);
            model.add_scaled(&velocity, -run.lr);
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
    }

    model.inference_scores = inference_scores(&records, run);
    Ok(TrainOutcome {
        records,
        feature_grads,
        model,
    })
}

/// Mean training scores over the final window; balanced without MDI.
fn inference_scores(records: &[StepRecord], run: &RunConfig) -> DominanceScores {
    if !run.enable_mdi || records.is_empty() {
        return DominanceScores::balanced(run.delta);
    }
    let tail = &records[records.len().saturating_sub(run.bias_window)..];
    let s_a = tail.iter().map(|r| r.s_a).sum::<f64>() / tail.len() as f64;
    DominanceScores {
        s_rgb: s_a,
        s_ir: 1.0 - s_a,
        delta: run.delta,
    }
}

/// Per-window mean of `|grad_a - grad_b|`; the last window may be partial.
pub fn windowed_bias(records: &[StepRecord], window: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("gradient bias needs at least one record"));
    }
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    Ok(records
        .chunks(window)
        .map(|c| c.iter().map(|r| (r.grad_a - r.grad_b).abs()).sum::<f64>() / c.len() as f64)
        .collect())
}

pub fn gradient_bias(records: &[StepRecord], window: usize) -> Result<f64> {
    let w = windowed_bias(records, window)?;
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Both,
    AOnly,
    BOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [Self::Both, Self::AOnly, Self::BOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::AOnly => "a_only",
            Self::BOnly => "b_only",
        }
    }
}

/// IoU between `pred > tau` and `gt > 0.5`; two empty masks score 1.
pub fn thresholded_iou(pred: &[f64], gt: &[f64], tau: f64) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let p = if p > tau { 1.0 } else { 0.0 };
        let g = if g > 0.5 { 1.0 } else { 0.0 };
        inter += f64::min(p, g);
        union += f64::max(p, g);
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub const EVAL_THRESHOLD: f64 = 0.5;

/// Mean IoU with one modality optionally replaced by zeros.
pub fn eval_restricted(model: &ToyModel, samples: &[SyntheticSample], mode: EvalMode, run: &RunConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("eval_restricted needs at least one sample"));
    }
    let scores = if run.enable_mdi {
        model.inference_scores
    } else {
        DominanceScores::balanced(run.delta)
    };
    // Inference only needs the prediction.
    let infer = RunConfig {
        enable_hcg_high: false,
        aux_weight: 0.0,
        ..run.clone()
    };
    let mut total = 0.0;
    for s in samples {
        let mut s = s.clone();
        match mode {
            EvalMode::Both => {}
            EvalMode::AOnly => s.mod_b = s.mod_b.zeros_like(),
            EvalMode::BOnly => s.mod_a = s.mod_a.zeros_like(),
        }
        let cache = forward_with_scores(model, &s, &infer, scores)?;
        debug_assert_eq!(dominant(&scores), cache.detached.dom);
        total += thresholded_iou(&cache.prediction, s.gt.data(), EVAL_THRESHOLD);
    }
    Ok(total / samples.len() as f64)
}
