//! Semantic distillation from a teacher feature map to a student.
//!
//! All gradients are with respect to the student only. The region weights
//! and the softening scale are functions of the teacher (and, for the
//! scale, of the initial gap) and are held constant when differentiating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spatial_grad_mean, spatial_grad_mean_grad, FeatureMap};

/// Pixels whose student or teacher channel vector is shorter than this are
/// left out of the direction-alignment average.
pub const DA_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl DistillWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("distill weights must be >= 0, got {self:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("distill weights are all zero"));
        }
        Ok(())
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillComponents {
    pub l_rw: f64,
    pub l_da: f64,
    pub l_struct: f64,
    pub delta_var: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct DistillResult {
    pub loss: f64,
    pub grad_student: FeatureMap,
    pub components: DistillComponents,
}

/// Mean squared elementwise gap between teacher and student.
pub fn feature_variance(teacher: &FeatureMap, student: &FeatureMap) -> Result<f64> {
    teacher.ensure_same_shape(student, "feature variance")?;
    let sum: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(t, s)| (t - s) * (t - s))
        .sum();
    Ok(sum / teacher.len() as f64)
}

/// `exp(-delta_var)`.
pub fn scale_factor(delta_var: f64) -> f64 {
    (-delta_var).exp()
}

/// Per-pixel channel L2 norm of the teacher over its spatial mean.
///
/// Returned as a flat `H*W` vector. An all-zero teacher yields all ones.
pub fn w_sem(teacher: &FeatureMap) -> Vec<f64> {
    let n = teacher.pixels();
    let norms: Vec<f64> = (0..n)
        .map(|p| {
            (0..teacher.channels())
                .map(|c| teacher.data()[c * n + p].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return vec![1.0; n];
    }
    norms.into_iter().map(|v| v / mean).collect()
}

/// Region-weighted squared error, averaged over all `C*H*W` elements.
pub fn loss_rw(student: &FeatureMap, teacher: &FeatureMap) -> Result<(f64, FeatureMap)> {
    student.ensure_same_shape(teacher, "loss_rw")?;
    let weights = w_sem(teacher);
    Ok(loss_rw_weighted(student, teacher, &weights))
}

fn loss_rw_weighted(student: &FeatureMap, teacher: &FeatureMap, weights: &[f64]) -> (f64, FeatureMap) {
    let n = student.pixels();
    let total = student.len() as f64;
    let mut grad = student.zeros_like();
    let mut loss = 0.0;
    for c in 0..student.channels() {
        for p in 0..n {
            let i = c * n + p;
            let diff = student.data()[i] - teacher.data()[i];
            let w2 = weights[p] * weights[p];
            loss += w2 * diff * diff;
            grad.data_mut()[i] = 2.0 * w2 * diff / total;
        }
    }
    (loss / total, grad)
}

/// Number of pixels that [`loss_da`] would average over.
pub fn da_included_pixels(student: &FeatureMap, teacher: &FeatureMap) -> Result<usize> {
    student.ensure_same_shape(teacher, "da_included_pixels")?;
    let n = student.pixels();
    let (s, t) = (student.data(), teacher.data());
    Ok((0..n)
        .filter(|&p| {
            let (mut ss, mut tt) = (0.0, 0.0);
            for c in 0..student.channels() {
                ss += s[c * n + p] * s[c * n + p];
                tt += t[c * n + p] * t[c * n + p];
            }
            ss.sqrt() >= DA_NORM_EPS && tt.sqrt() >= DA_NORM_EPS
        })
        .count())
}

/// One minus the mean per-pixel cosine similarity.
pub fn loss_da(student: &FeatureMap, teacher: &FeatureMap) -> Result<(f64, FeatureMap)> {
    student.ensure_same_shape(teacher, "loss_da")?;
    let n = student.pixels();
    let channels = student.channels();
    let (s, t) = (student.data(), teacher.data());
    struct Pixel {
        p: usize,
        ss: f64,
        st_norm: f64,
        cos: f64,
    }
    let mut included = Vec::with_capacity(n);
    for p in 0..n {
        let (mut ss, mut tt, mut dot) = (0.0, 0.0, 0.0);
        for c in 0..channels {
            let (a, b) = (s[c * n + p], t[c * n + p]);
            ss += a * a;
            tt += b * b;
            dot += a * b;
        }
        if ss.sqrt() < DA_NORM_EPS || tt.sqrt() < DA_NORM_EPS {
            continue;
        }
        // sqrt(ss * tt) rather than sqrt(ss) * sqrt(tt): identical vectors give cos = 1 exactly.
        let st_norm = (ss * tt).sqrt();
        included.push(Pixel {
            p,
            ss,
            st_norm,
            cos: dot / st_norm,
        });
    }
    if included.is_empty() {
        return Err(Error::invalid("direction alignment: every pixel has a zero-norm vector"));
    }
    let count = included.len() as f64;
    let mut grad = student.zeros_like();
    let mut cos_sum = 0.0;
    for px in &included {
        cos_sum += px.cos;
        for c in 0..channels {
            let i = c * n + px.p;
            let d_cos = t[i] / px.st_norm - px.cos * s[i] / px.ss;
            grad.data_mut()[i] = -d_cos / count;
        }
    }
    let loss = (1.0 - cos_sum / count).clamp(0.0, 2.0);
    Ok((loss, grad))
}

/// `|Grad(S) - Grad(T)|` with the subgradient 0 at a tie.
pub fn loss_struct(student: &FeatureMap, teacher: &FeatureMap) -> Result<(f64, FeatureMap)> {
    student.ensure_same_shape(teacher, "loss_struct")?;
    let gs = spatial_grad_mean(student)?;
    let gt = spatial_grad_mean(teacher)?;
    let diff = gs - gt;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let grad = if sign == 0.0 {
        student.zeros_like()
    } else {
        spatial_grad_mean_grad(student)?.scale(sign)
    };
    Ok((diff.abs(), grad))
}

/// `Scale * (alpha L_RW + beta L_DA) + gamma L_Struct` with `Scale = exp(-Delta)`.
pub fn loss_distill(student: &FeatureMap, teacher: &FeatureMap, w: &DistillWeights) -> Result<DistillResult> {
    student.ensure_same_shape(teacher, "loss_distill")?;
    let delta_var = feature_variance(teacher, student)?;
    loss_distill_inner(student, teacher, w, delta_var, scale_factor(delta_var))
}

/// [`loss_distill`] with the softening scale supplied by the caller.
///
/// Used when the scale is frozen from an earlier evaluation; `delta_var`
/// is still reported from the current inputs.
pub fn loss_distill_with_scale(
    student: &FeatureMap,
    teacher: &FeatureMap,
    w: &DistillWeights,
    scale: f64,
) -> Result<DistillResult> {
    student.ensure_same_shape(teacher, "loss_distill")?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::invalid(format!("scale must be finite and >= 0, got {scale}")));
    }
    let delta_var = feature_variance(teacher, student)?;
    loss_distill_inner(student, teacher, w, delta_var, scale)
}

fn loss_distill_inner(
    student: &FeatureMap,
    teacher: &FeatureMap,
    w: &DistillWeights,
    delta_var: f64,
    scale: f64,
) -> Result<DistillResult> {
    w.validate()?;
    let mut grad = student.zeros_like();
    let mut components = DistillComponents {
        l_rw: 0.0,
        l_da: 0.0,
        l_struct: 0.0,
        delta_var,
        scale,
    };
    if w.alpha > 0.0 {
        let (l, g) = loss_rw(student, teacher)?;
        components.l_rw = l;
        grad.add_scaled(&g, scale * w.alpha);
    }
    if w.beta > 0.0 {
        let (l, g) = loss_da(student, teacher)?;
        components.l_da = l;
        grad.add_scaled(&g, scale * w.beta);
    }
    if w.gamma > 0.0 {
        let (l, g) = loss_struct(student, teacher)?;
        components.l_struct = l;
        grad.add_scaled(&g, w.gamma);
    }
    let loss = scale * (w.alpha * components.l_rw + w.beta * components.l_da) + w.gamma * components.l_struct;
    Ok(DistillResult {
        loss,
        grad_student: grad,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{compare_gradients, finite_diff_grad};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn rand_map(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn variance_and_scale() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let a = rand_map(&mut rng, 2, 3, 3);
        assert_eq!(feature_variance(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_variance(&a, &a.map(|v| v + 2.0)).unwrap(), 4.0);
        let b = rand_map(&mut rng, 2, 3, 3);
        let expect: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 18.0;
        assert!((feature_variance(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert!(feature_variance(&a, &FeatureMap::zeros(2, 3, 2)).is_err());

        assert_eq!(scale_factor(0.0), 1.0);
        assert!((scale_factor(2f64.ln()) - 0.5).abs() <= 1e-15);
        assert!(scale_factor(50.0) < 1e-20);
        assert!(scale_factor(1.0) > scale_factor(1.0 + 1e-9));
    }

    #[test]
    fn w_sem_cases() {
        let uniform = FeatureMap::filled(3, 2, 2, -0.4);
        assert!(w_sem(&uniform).iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let mut one = FeatureMap::zeros(2, 2, 3);
        one.set(1, 1, 2, 5.0);
        let w = w_sem(&one);
        assert_eq!(w[5], 6.0);
        assert!(w[..5].iter().all(|&v| v == 0.0));

        assert_eq!(w_sem(&FeatureMap::zeros(2, 2, 2)), vec![1.0; 4]);

        let mut rng = SplitMix64::seed_from_u64(2);
        let t = rand_map(&mut rng, 2, 2, 2);
        let norms: Vec<f64> = (0..4)
            .map(|p| (t.data()[p].powi(2) + t.data()[4 + p].powi(2)).sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / 4.0;
        for (got, n) in w_sem(&t).iter().zip(&norms) {
            assert!((got - n / mean).abs() < 1e-15);
        }
    }

    #[test]
    fn rw_cases() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let a = rand_map(&mut rng, 2, 3, 3);
        let (l, g) = loss_rw(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let teacher = FeatureMap::filled(2, 3, 3, 0.8);
        let student = rand_map(&mut rng, 2, 3, 3);
        let mse = feature_variance(&teacher, &student).unwrap();
        assert!((loss_rw(&student, &teacher).unwrap().0 - mse).abs() < 1e-15);
    }

    #[test]
    fn da_cases() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let t = rand_map(&mut rng, 3, 3, 3);
        assert_eq!(loss_da(&t, &t).unwrap().0, 0.0);
        assert_eq!(loss_da(&t.scale(-1.0), &t).unwrap().0, 2.0);
        assert!(matches!(
            loss_da(&FeatureMap::zeros(3, 3, 3), &t),
            Err(Error::InvalidArgument(_))
        ));
        // A zero-norm pixel is skipped rather than poisoning the mean.
        let mut s = t.clone();
        for c in 0..3 {
            s.set(c, 0, 0, 0.0);
        }
        let (l, g) = loss_da(&s, &t).unwrap();
        assert!(l.abs() < 1e-15);
        assert_eq!(g.get(0, 0, 0), 0.0);
    }

    #[test]
    fn struct_cases() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let a = rand_map(&mut rng, 2, 3, 3);
        assert_eq!(loss_struct(&a, &a).unwrap().0, 0.0);
        let checker = FeatureMap::from_fn(1, 4, 4, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let flat = FeatureMap::filled(1, 4, 4, 0.2);
        assert_eq!(loss_struct(&flat, &checker).unwrap().0, 4.0);
        assert!(loss_struct(&FeatureMap::zeros(1, 1, 3), &FeatureMap::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn distill_identities() {
        let mut rng = SplitMix64::seed_from_u64(6);
        let a = rand_map(&mut rng, 3, 4, 4);
        let r = loss_distill(&a, &a, &DistillWeights::default()).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.components.scale, 1.0);
        assert!(r.grad_student.data().iter().all(|&v| v == 0.0));

        let b = rand_map(&mut rng, 3, 4, 4);
        let only_struct = DistillWeights::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(
            loss_distill(&a, &b, &only_struct).unwrap().loss,
            loss_struct(&a, &b).unwrap().0
        );

        let w = DistillWeights::new(0.7, 0.2, 0.4).unwrap();
        let r = loss_distill(&a, &b, &w).unwrap();
        let c = r.components;
        assert_eq!(r.loss, c.scale * (0.7 * c.l_rw + 0.2 * c.l_da) + 0.4 * c.l_struct);
        assert!(DistillWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(DistillWeights::new(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn component_gradients_match_finite_differences() {
        let mut rng = SplitMix64::seed_from_u64(7);
        for _ in 0..20 {
            let s = rand_map(&mut rng, 3, 4, 4);
            let t = rand_map(&mut rng, 3, 4, 4);
            for (f, tol) in [
                (loss_rw as fn(&FeatureMap, &FeatureMap) -> Result<(f64, FeatureMap)>, 1e-6),
                (loss_da, 1e-6),
                (loss_struct, 1e-5),
            ] {
                let (_, ana) = f(&s, &t).unwrap();
                let num = finite_diff_grad(|x| f(x, &t).unwrap().0, &s, 1e-6).unwrap();
                let cmp = compare_gradients(ana.data(), num.data(), tol, 1e-8);
                assert!(cmp.passed, "{cmp:?}");
            }
            let w = DistillWeights::default();
            let r = loss_distill(&s, &t, &w).unwrap();
            let scale = r.components.scale;
            let num = finite_diff_grad(|x| loss_distill_with_scale(x, &t, &w, scale).unwrap().loss, &s, 1e-6).unwrap();
            assert!(compare_gradients(r.grad_student.data(), num.data(), 1e-5, 1e-8).passed);
        }
    }
}
