//! Modality Dominance Index.
//!
//! Each modality gets two raw terms: a *diversity* (entropy of the softmax
//! over its flattened activations) and a *response* (L2 norm of the
//! gradient of an auxiliary detection loss with respect to the feature
//! map). Both pairs are sum-normalised across the two modalities and then
//! blended with `delta`, so the two scores always sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, shannon_entropy, softmax, FeatureMap, Matrix};

/// Denominator floor for [`normalize_pair`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Balance between diversity and response used when nothing else is configured.
pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Ir,
            Modality::Ir => Modality::Rgb,
        }
    }
}

/// Object-region mask over the feature grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GroundTruthMask {
    /// Builds a mask, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dims must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("mask contains NaN".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn as_feature_map(&self) -> FeatureMap {
        FeatureMap::new(1, self.height, self.width, self.data.clone()).expect("valid mask")
    }

    fn check_against(&self, f: &FeatureMap) -> Result<()> {
        if (self.height, self.width) != (f.height(), f.width()) {
            return Err(Error::shape(format!(
                "mask {}x{} against feature {:?}",
                self.height,
                self.width,
                f.shape()
            )));
        }
        Ok(())
    }
}

/// Auxiliary detector: per-pixel linear map `C -> 1` followed by a logistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxDetector {
    pub weights: Matrix,
    pub bias: f64,
}

impl AuxDetector {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        let c = weights.len();
        Ok(Self {
            weights: Matrix::new(1, c, weights)?,
            bias,
        })
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            weights: Matrix::zeros(1, channels),
            bias: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self, f: &FeatureMap, gt: &GroundTruthMask) -> Result<()> {
        if self.channels() != f.channels() {
            return Err(Error::shape(format!(
                "aux detector expects {} channels, feature has {}",
                self.channels(),
                f.channels()
            )));
        }
        gt.check_against(f)
    }

    /// Heatmap `sigma(w . f_p + b)` for every pixel `p`.
    pub fn predict(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        if self.channels() != f.channels() {
            return Err(Error::shape(format!(
                "aux detector expects {} channels, feature has {}",
                self.channels(),
                f.channels()
            )));
        }
        let n = f.pixels();
        let w = self.weights.data();
        Ok((0..n)
            .map(|p| {
                let mut z = 0.0;
                for (c, wc) in w.iter().enumerate() {
                    z += wc * f.data()[c * n + p];
                }
                sigmoid(z + self.bias)
            })
            .collect())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Normalised dominance scores for the two modalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceScores {
    pub s_rgb: f64,
    pub s_ir: f64,
    pub delta: f64,
}

impl DominanceScores {
    /// The "no evidence" point `(0.5, 0.5)`.
    pub fn balanced(delta: f64) -> Self {
        Self {
            s_rgb: 0.5,
            s_ir: 0.5,
            delta,
        }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Rgb => self.s_rgb,
            Modality::Ir => self.s_ir,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            s_rgb: self.s_ir,
            s_ir: self.s_rgb,
            delta: self.delta,
        }
    }
}

/// Raw, pre-normalisation MDI terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdiTerms {
    pub diversity_rgb: f64,
    pub diversity_ir: f64,
    pub response_rgb: f64,
    pub response_ir: f64,
}

/// Entropy (nats) of the softmax over the flattened feature values.
///
/// With a mask, only values at pixels where the mask exceeds 0.5 take part.
pub fn diversity(f: &FeatureMap, mask: Option<&GroundTruthMask>) -> Result<f64> {
    let values: Vec<f64> = match mask {
        None => f.data().to_vec(),
        Some(m) => {
            m.check_against(f)?;
            let n = f.pixels();
            let keep: Vec<usize> = (0..n).filter(|&p| m.data[p] > 0.5).collect();
            if keep.is_empty() {
                return Err(Error::invalid("mask selects no pixels"));
            }
            (0..f.channels())
                .flat_map(|c| keep.iter().map(move |&p| c * n + p))
                .map(|i| f.data()[i])
                .collect()
        }
    };
    shannon_entropy(&softmax(&values)?)
}

/// `sum_p (sigma(w . f_p + b) - gt_p)^2`.
pub fn aux_loss(f: &FeatureMap, g: &AuxDetector, gt: &GroundTruthMask) -> Result<f64> {
    g.check(f, gt)?;
    let pred = g.predict(f)?;
    Ok(pred
        .iter()
        .zip(&gt.data)
        .map(|(s, t)| (s - t) * (s - t))
        .sum())
}

/// `dL_aux / dF`: per pixel and channel `2 (sigma - gt) sigma (1 - sigma) w_c`.
pub fn aux_loss_grad(f: &FeatureMap, g: &AuxDetector, gt: &GroundTruthMask) -> Result<FeatureMap> {
    g.check(f, gt)?;
    let pred = g.predict(f)?;
    let n = f.pixels();
    let mut grad = f.zeros_like();
    let w = g.weights.data();
    for p in 0..n {
        let s = pred[p];
        let dz = 2.0 * (s - gt.data[p]) * s * (1.0 - s);
        for (c, wc) in w.iter().enumerate() {
            grad.data_mut()[c * n + p] = dz * wc;
        }
    }
    Ok(grad)
}

/// Gradient of [`aux_loss`] with respect to the detector's own weights and bias.
pub fn aux_loss_param_grad(
    f: &FeatureMap,
    g: &AuxDetector,
    gt: &GroundTruthMask,
) -> Result<(Vec<f64>, f64)> {
    g.check(f, gt)?;
    let pred = g.predict(f)?;
    let n = f.pixels();
    let mut gw = vec![0.0; g.channels()];
    let mut gb = 0.0;
    for p in 0..n {
        let s = pred[p];
        let dz = 2.0 * (s - gt.data[p]) * s * (1.0 - s);
        gb += dz;
        for (c, slot) in gw.iter_mut().enumerate() {
            *slot += dz * f.data()[c * n + p];
        }
    }
    Ok((gw, gb))
}

/// Task-response sensitivity: Frobenius norm of [`aux_loss_grad`].
pub fn response(f: &FeatureMap, g: &AuxDetector, gt: &GroundTruthMask) -> Result<f64> {
    Ok(frobenius_norm(&aux_loss_grad(f, g, gt)?))
}

/// Sum-to-one normalisation of a nonnegative pair; `(0.5, 0.5)` when both vanish.
pub fn normalize_pair(a: f64, b: f64) -> Result<(f64, f64)> {
    if a < 0.0 || b < 0.0 || a.is_nan() || b.is_nan() {
        return Err(Error::invalid(format!("normalize_pair needs nonnegative inputs, got ({a}, {b})")));
    }
    let s = a + b;
    if s > NORMALIZE_EPS {
        Ok((a / s, b / s))
    } else {
        Ok((0.5, 0.5))
    }
}

pub fn mdi_terms(
    f_rgb: &FeatureMap,
    f_ir: &FeatureMap,
    g_rgb: &AuxDetector,
    g_ir: &AuxDetector,
    gt: &GroundTruthMask,
) -> Result<MdiTerms> {
    Ok(MdiTerms {
        diversity_rgb: diversity(f_rgb, None)?,
        diversity_ir: diversity(f_ir, None)?,
        response_rgb: response(f_rgb, g_rgb, gt)?,
        response_ir: response(f_ir, g_ir, gt)?,
    })
}

/// Normalises both raw pairs and blends them with `delta`.
pub fn scores_from_terms(terms: &MdiTerms, delta: f64) -> Result<DominanceScores> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!("delta must lie in [0, 1], got {delta}")));
    }
    let (d_rgb, d_ir) = normalize_pair(terms.diversity_rgb, terms.diversity_ir)?;
    let (r_rgb, r_ir) = normalize_pair(terms.response_rgb, terms.response_ir)?;
    Ok(DominanceScores {
        s_rgb: delta * d_rgb + (1.0 - delta) * r_rgb,
        s_ir: delta * d_ir + (1.0 - delta) * r_ir,
        delta,
    })
}

pub fn mdi_scores(
    f_rgb: &FeatureMap,
    f_ir: &FeatureMap,
    g_rgb: &AuxDetector,
    g_ir: &AuxDetector,
    gt: &GroundTruthMask,
    delta: f64,
) -> Result<DominanceScores> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!("delta must lie in [0, 1], got {delta}")));
    }
    f_rgb.ensure_same_shape(f_ir, "mdi features")?;
    scores_from_terms(&mdi_terms(f_rgb, f_ir, g_rgb, g_ir, gt)?, delta)
}

/// The modality with the strictly larger score; an exact tie goes to RGB.
pub fn dominant(scores: &DominanceScores) -> Modality {
    if scores.s_ir > scores.s_rgb {
        Modality::Ir
    } else {
        Modality::Rgb
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{compare_gradients, finite_diff_grad};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn rand_map(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.5..1.5))
    }

    fn rand_det(rng: &mut SplitMix64, c: usize) -> AuxDetector {
        AuxDetector::new((0..c).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(-0.5..0.5))
            .unwrap()
    }

    fn rand_gt(rng: &mut SplitMix64, h: usize, w: usize) -> GroundTruthMask {
        GroundTruthMask::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mask_values_are_clamped() {
        let m = GroundTruthMask::new(1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(m.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn diversity_cases() {
        let f = FeatureMap::filled(2, 3, 4, 0.7);
        assert!((diversity(&f, None).unwrap() - 24f64.ln()).abs() < 1e-12);

        let mut spike = FeatureMap::zeros(1, 3, 3);
        spike.set(0, 1, 1, 200.0);
        assert!(diversity(&spike, None).unwrap() < 1e-70);

        // Frozen from a scalar-loop softmax + entropy evaluation.
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((diversity(&f, None).unwrap() - 0.9475369639754254).abs() < 1e-14);
    }

    #[test]
    fn masked_diversity() {
        let f = FeatureMap::new(2, 1, 3, vec![1.0, 9.0, 1.0, 1.0, -9.0, 1.0]).unwrap();
        let m = GroundTruthMask::new(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        assert!((diversity(&f, Some(&m)).unwrap() - 4f64.ln()).abs() < 1e-12);
        let empty = GroundTruthMask::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(diversity(&f, Some(&empty)), Err(Error::InvalidArgument(_))));
        let wrong = GroundTruthMask::new(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(diversity(&f, Some(&wrong)), Err(Error::Shape(_))));
    }

    #[test]
    fn aux_loss_cases() {
        // w = 0, b = 0 gives sigma = 0.5 everywhere.
        let f = FeatureMap::zeros(2, 1, 1);
        let g = AuxDetector::zeros(2);
        let gt = GroundTruthMask::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(aux_loss(&f, &g, &gt).unwrap(), 0.25);
        let gt_half = GroundTruthMask::new(1, 1, vec![0.5]).unwrap();
        assert_eq!(aux_loss(&f, &g, &gt_half).unwrap(), 0.0);
        assert_eq!(frobenius_norm(&aux_loss_grad(&f, &g, &gt_half).unwrap()), 0.0);
        // No feature dependence when w = 0.
        assert_eq!(response(&f, &g, &gt).unwrap(), 0.0);
        let bad = GroundTruthMask::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(aux_loss(&f, &g, &bad), Err(Error::Shape(_))));
        assert!(matches!(
            aux_loss(&f, &AuxDetector::zeros(3), &gt),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn aux_loss_matches_pixelwise_oracle() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let f = rand_map(&mut rng, 2, 3, 3);
        let g = rand_det(&mut rng, 2);
        let gt = rand_gt(&mut rng, 3, 3);
        let mut expect = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                let z = g.weights.get(0, 0) * f.get(0, y, x) + g.weights.get(0, 1) * f.get(1, y, x) + g.bias;
                let s = 1.0 / (1.0 + (-z).exp());
                let t = gt.data()[y * 3 + x];
                expect += (s - t) * (s - t);
            }
        }
        assert!((aux_loss(&f, &g, &gt).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn aux_gradients_match_finite_differences() {
        let mut rng = SplitMix64::seed_from_u64(12);
        for _ in 0..25 {
            let c = rng.random_range(1..=4);
            let h = rng.random_range(1..=5);
            let w = rng.random_range(1..=5);
            let f = rand_map(&mut rng, c, h, w);
            let g = rand_det(&mut rng, c);
            let gt = rand_gt(&mut rng, h, w);
            let analytic = aux_loss_grad(&f, &g, &gt).unwrap();
            let numeric = finite_diff_grad(|x| aux_loss(x, &g, &gt).unwrap(), &f, 1e-6).unwrap();
            let cmp = compare_gradients(analytic.data(), numeric.data(), 1e-6, 1e-8);
            assert!(cmp.passed, "{cmp:?}");
            assert!((response(&f, &g, &gt).unwrap() - frobenius_norm(&numeric)).abs() <= 1e-6 * frobenius_norm(&numeric) + 1e-8);

            let (gw, gb) = aux_loss_param_grad(&f, &g, &gt).unwrap();
            let mut params = g.weights.data().to_vec();
            params.push(g.bias);
            let num = crate::tensor::finite_diff_grad_slice(
                |p| {
                    let det = AuxDetector::new(p[..c].to_vec(), p[c]).unwrap();
                    aux_loss(&f, &det, &gt).unwrap()
                },
                &params,
                1e-6,
            )
            .unwrap();
            let mut ana = gw.clone();
            ana.push(gb);
            assert!(compare_gradients(&ana, &num, 1e-6, 1e-8).passed);
        }
    }

    #[test]
    fn normalize_pair_cases() {
        assert_eq!(normalize_pair(2.0, 2.0).unwrap(), (0.5, 0.5));
        assert_eq!(normalize_pair(0.0, 0.0).unwrap(), (0.5, 0.5));
        assert_eq!(normalize_pair(1.0, 3.0).unwrap(), (0.25, 0.75));
        assert!(matches!(normalize_pair(-1.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scores_symmetric_and_endpoints() {
        let mut rng = SplitMix64::seed_from_u64(13);
        let f = rand_map(&mut rng, 3, 4, 4);
        let g = rand_det(&mut rng, 3);
        let gt = rand_gt(&mut rng, 4, 4);
        for delta in [0.0, 0.3, 1.0] {
            let s = mdi_scores(&f, &f, &g, &g, &gt, delta).unwrap();
            assert_eq!((s.s_rgb, s.s_ir), (0.5, 0.5));
        }

        let f2 = rand_map(&mut rng, 3, 4, 4);
        let g2 = rand_det(&mut rng, 3);
        let t = mdi_terms(&f, &f2, &g, &g2, &gt).unwrap();
        let s1 = mdi_scores(&f, &f2, &g, &g2, &gt, 1.0).unwrap();
        assert_eq!((s1.s_rgb, s1.s_ir), normalize_pair(t.diversity_rgb, t.diversity_ir).unwrap());
        let s0 = mdi_scores(&f, &f2, &g, &g2, &gt, 0.0).unwrap();
        assert_eq!((s0.s_rgb, s0.s_ir), normalize_pair(t.response_rgb, t.response_ir).unwrap());

        assert!(mdi_scores(&f, &f2, &g, &g2, &gt, 1.5).is_err());
        assert!(mdi_scores(&f, &f2, &g, &g2, &gt, -0.1).is_err());
    }

    #[test]
    fn larger_response_raises_score() {
        // Zero features pin sigma at 0.5, so the response is linear in |w|
        // while the diversity stays fixed.
        let f = FeatureMap::zeros(2, 3, 3);
        let gt = GroundTruthMask::new(3, 3, vec![1.0; 9]).unwrap();
        let g_ir = AuxDetector::new(vec![0.5, 0.5], 0.0).unwrap();
        let mut prev = 0.0;
        for k in [0.1, 0.5, 1.0, 2.0, 8.0] {
            let g_rgb = AuxDetector::new(vec![0.5 * k, 0.5 * k], 0.0).unwrap();
            let s = mdi_scores(&f, &f, &g_rgb, &g_ir, &gt, 0.4).unwrap();
            assert!(s.s_rgb > prev);
            prev = s.s_rgb;
        }
    }

    #[test]
    fn dominant_tie_break() {
        let s = |a: f64| DominanceScores {
            s_rgb: a,
            s_ir: 1.0 - a,
            delta: 0.5,
        };
        assert_eq!(dominant(&s(0.7)), Modality::Rgb);
        assert_eq!(dominant(&s(0.3)), Modality::Ir);
        assert_eq!(dominant(&s(0.5)), Modality::Rgb);
    }
}
