use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::WeightingStrategy;
use crate::hcg::DistillWeights;
use crate::mdi::DEFAULT_DELTA;

use super::model::ModelSpec;

/// Everything that defines a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: WeightingStrategy,
    pub enable_mdi: bool,
    pub enable_hcg_low: bool,
    pub enable_hcg_high: bool,
    /// Forces the inverse weighting regardless of `strategy`.
    pub enable_miw: bool,
    /// Multiplier on modality A's encoder gradients.
    pub grad_boost_lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponential smoothing of the dominance scores across steps; 0 disables it.
    pub score_ema: f64,
    /// Let the auxiliary detection losses reach the encoders.
    pub aux_in_objective: bool,
    pub aux_weight: f64,
    pub model: ModelSpec,
    /// Held-out samples used by the restricted evaluation.
    pub eval_samples: usize,
    pub bias_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: WeightingStrategy::Uniform,
            enable_mdi: false,
            enable_hcg_low: false,
            enable_hcg_high: false,
            enable_miw: false,
            grad_boost_lambda: 1.0,
            steps: 2000,
            lr: 0.1,
            seed: 0,
            delta: DEFAULT_DELTA,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            batch_size: 4,
            momentum: 0.0,
            weight_decay: 0.0,
            score_ema: 0.0,
            aux_in_objective: false,
            aux_weight: 0.1,
            model: ModelSpec::default(),
            eval_samples: 64,
            bias_window: 100,
        }
    }
}

impl RunConfig {
    /// Sets the four component switches at once.
    pub fn with_components(mut self, mdi: bool, hcg_low: bool, hcg_high: bool, miw: bool) -> Self {
        self.enable_mdi = mdi;
        self.enable_hcg_low = hcg_low;
        self.enable_hcg_high = hcg_high;
        self.enable_miw = miw;
        self
    }

    /// Everything switched on.
    pub fn full() -> Self {
        Self {
            strategy: WeightingStrategy::Inverse,
            ..Self::default()
        }
        .with_components(true, true, true, true)
    }

    pub fn effective_strategy(&self) -> WeightingStrategy {
        if self.enable_miw {
            WeightingStrategy::Inverse
        } else {
            self.strategy
        }
    }

    pub fn distill_weights(&self) -> DistillWeights {
        DistillWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.grad_boost_lambda.is_finite() && self.grad_boost_lambda >= 1.0) {
            return bad(format!("grad_boost_lambda must be >= 1, got {}", self.grad_boost_lambda));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1], got {}", self.delta));
        }
        if self.enable_hcg_high {
            self.distill_weights().validate()?;
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.score_ema) {
            return bad(format!("score_ema must lie in [0, 1), got {}", self.score_ema));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return bad(format!("aux_weight must be >= 0, got {}", self.aux_weight));
        }
        if self.bias_window == 0 {
            return bad("bias_window must be >= 1".into());
        }
        self.model.validate()
    }
}
