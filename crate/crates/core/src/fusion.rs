//! Score-weighted fusion of the dominant and refined non-dominant features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdi::{dominant, DominanceScores, Modality};
use crate::tensor::FeatureMap;

const SCORE_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingStrategy {
    /// Minimal inverse weighting: the dominant feature is scaled by the
    /// non-dominant score and vice versa.
    Inverse,
    Uniform,
    /// Each feature scaled by its own score.
    Forward,
}

impl WeightingStrategy {
    pub const ALL: [WeightingStrategy; 3] = [Self::Inverse, Self::Uniform, Self::Forward];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Inverse => "inverse",
            Self::Uniform => "uniform",
            Self::Forward => "forward",
        }
    }
}

impl fmt::Display for WeightingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inverse" | "miw" => Ok(Self::Inverse),
            "uniform" => Ok(Self::Uniform),
            "forward" => Ok(Self::Forward),
            other => Err(Error::invalid(format!(
                "unknown weighting strategy '{other}' (expected inverse, uniform or forward)"
            ))),
        }
    }
}

/// Fusion coefficients `(on F_dom, on F'_non)` when `F_dom` comes from modality `dom`.
pub fn fusion_coefficients(
    scores: &DominanceScores,
    dom: Modality,
    strategy: WeightingStrategy,
) -> Result<(f64, f64)> {
    let sum = scores.s_rgb + scores.s_ir;
    if !sum.is_finite() || (sum - 1.0).abs() > SCORE_SUM_TOL {
        return Err(Error::invalid(format!(
            "dominance scores must sum to 1, got {} + {}",
            scores.s_rgb, scores.s_ir
        )));
    }
    let s_dom = scores.get(dom);
    let s_non = scores.get(dom.other());
    Ok(match strategy {
        WeightingStrategy::Inverse => (s_non, s_dom),
        WeightingStrategy::Uniform => (0.5, 0.5),
        WeightingStrategy::Forward => (s_dom, s_non),
    })
}

/// `(S_non * F_dom) + (S_dom * F'_non)`, roles taken from [`dominant`].
pub fn miw_fuse(f_dom: &FeatureMap, f_non_refined: &FeatureMap, scores: &DominanceScores) -> Result<FeatureMap> {
    fuse(f_dom, f_non_refined, scores, WeightingStrategy::Inverse)
}

/// Fuses with the dominant role taken from [`dominant`]`(scores)`.
pub fn fuse(
    f_dom: &FeatureMap,
    f_non_refined: &FeatureMap,
    scores: &DominanceScores,
    strategy: WeightingStrategy,
) -> Result<FeatureMap> {
    fuse_with_role(f_dom, f_non_refined, scores, dominant(scores), strategy)
}

/// Fuses with `f_dom` explicitly attributed to modality `dom`.
pub fn fuse_with_role(
    f_dom: &FeatureMap,
    f_non_refined: &FeatureMap,
    scores: &DominanceScores,
    dom: Modality,
    strategy: WeightingStrategy,
) -> Result<FeatureMap> {
    f_dom.ensure_same_shape(f_non_refined, "fusion inputs")?;
    let (a, b) = fusion_coefficients(scores, dom, strategy)?;
    Ok(f_dom.zip_map(f_non_refined, |d, n| a * d + b * n))
}
