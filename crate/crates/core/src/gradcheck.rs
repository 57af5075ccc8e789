//! Randomised finite-difference battery over every analytic gradient.
//!
//! Piecewise-smooth functions (rectification, absolute values) can put a
//! kink inside the probe interval. When every mismatching coordinate shows
//! disagreeing one-sided slopes the instance is redrawn and counted as a
//! rejection instead of a failure.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use crate::error::Result;
use crate::hcg::{loss_da, loss_distill_with_scale, loss_rw, loss_struct, DistillWeights, LowLevelCache, QKProjection, RefineBlock};
use crate::mdi::{aux_loss, aux_loss_grad, aux_loss_param_grad, AuxDetector, GroundTruthMask};
use crate::sim::{backward, derive_seed, forward, forward_frozen, gen_sample, GeneratorConfig, ModelSpec, RunConfig, ToyModel};
use crate::tensor::{
    compare_gradients, conv1x1, conv1x1_backward, conv3x3, conv3x3_backward, finite_diff_grad_slice, FeatureMap,
    Kernel3x3, Matrix,
};

pub const FD_STEP: f64 = 1e-6;
pub const SMOOTH_REL_TOL: f64 = 1e-6;
pub const PIECEWISE_REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub rel_tol: f64,
    pub instances: usize,
    pub passed: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub seconds: f64,
}

impl CheckSummary {
    pub fn ok(&self) -> bool {
        self.instances > 0 && self.passed == self.instances
    }
}

enum Outcome {
    Checked { passed: bool, rel: f64, abs: f64 },
    Kink,
}

/// Evaluates one instance: `f` is the scalar function, `analytic` its claimed gradient at `x`.
fn judge(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], rel_tol: f64) -> Result<Outcome> {
    let numeric = finite_diff_grad_slice(f, x, FD_STEP)?;
    let cmp = compare_gradients(analytic, &numeric, rel_tol, ABS_TOL);
    if cmp.passed {
        return Ok(Outcome::Checked {
            passed: true,
            rel: cmp.max_rel_err,
            abs: cmp.max_abs_err,
        });
    }
    let f0 = f(x);
    let mut probe = x.to_vec();
    let mut all_kinks = true;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if err <= ABS_TOL || (scale > 0.0 && err / scale <= rel_tol) {
            continue;
        }
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let fwd = (f(&probe) - f0) / FD_STEP;
        probe[i] = orig - FD_STEP;
        let bwd = (f0 - f(&probe)) / FD_STEP;
        probe[i] = orig;
        if (fwd - bwd).abs() <= 1e-4 * n.abs().max(1e-2) {
            all_kinks = false;
            break;
        }
    }
    Ok(if all_kinks {
        Outcome::Kink
    } else {
        Outcome::Checked {
            passed: false,
            rel: cmp.max_rel_err,
            abs: cmp.max_abs_err,
        }
    })
}

/// One randomised instance: returns the function, the point and the analytic gradient.
type Instance = (Box<dyn Fn(&[f64]) -> f64>, Vec<f64>, Vec<f64>);

fn run_check(
    name: &str,
    rel_tol: f64,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut SplitMix64) -> Result<Instance>,
) -> Result<CheckSummary> {
    let start = Instant::now();
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut s = CheckSummary {
        name: name.to_string(),
        rel_tol,
        instances: 0,
        passed: 0,
        rejected: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        seconds: 0.0,
    };
    let max_attempts = 4 * instances;
    let mut attempts = 0;
    while s.instances < instances && attempts < max_attempts {
        attempts += 1;
        let (f, x, analytic) = make(&mut rng)?;
        match judge(f.as_ref(), &x, &analytic, rel_tol)? {
            Outcome::Kink => s.rejected += 1,
            Outcome::Checked { passed, rel, abs } => {
                s.instances += 1;
                s.passed += usize::from(passed);
                s.max_rel_err = s.max_rel_err.max(rel);
                s.max_abs_err = s.max_abs_err.max(abs);
            }
        }
    }
    s.seconds = start.elapsed().as_secs_f64();
    Ok(s)
}

fn rand_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_map(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, rand_vec(rng, c * h * w)).expect("sized")
}

fn rand_dims(rng: &mut SplitMix64) -> (usize, usize, usize) {
    (rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4))
}

fn rand_gt(rng: &mut SplitMix64, h: usize, w: usize) -> GroundTruthMask {
    GroundTruthMask::new(h, w, (0..h * w).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect()).expect("sized")
}

fn map_fn(shape: (usize, usize, usize), f: impl Fn(&FeatureMap) -> f64 + 'static) -> Box<dyn Fn(&[f64]) -> f64> {
    let (c, h, w) = shape;
    Box::new(move |v: &[f64]| f(&FeatureMap::new(c, h, w, v.to_vec()).expect("sized")))
}

/// Student-gradient check for one of the distillation terms.
fn distill_term(
    rng: &mut SplitMix64,
    term: fn(&FeatureMap, &FeatureMap) -> Result<(f64, FeatureMap)>,
) -> Result<Instance> {
    let (c, h, w) = rand_dims(rng);
    let s = rand_map(rng, c, h, w);
    let t = rand_map(rng, c, h, w);
    let (_, g) = term(&s, &t)?;
    let f = map_fn(s.shape(), move |m| term(m, &t).map(|r| r.0).unwrap_or(f64::NAN));
    Ok((f, s.into_data(), g.into_data()))
}

/// Full parameter gradient of the toy pipeline for one flag combination.
fn end_to_end(rng: &mut SplitMix64, flags: u8) -> Result<Instance> {
    let spec = ModelSpec::tiny();
    let mut model = ToyModel::init(spec, rng.random(), false)?;
    let mut flat = model.to_flat();
    for v in flat.iter_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    model.set_flat(&flat)?;
    let generator = GeneratorConfig {
        height: 6,
        width: 6,
        ..GeneratorConfig::a_dominant()
    };
    let sample = gen_sample(&generator, rng.random())?;
    let run = RunConfig {
        model: spec,
        enable_mdi: flags & 1 != 0,
        enable_hcg_low: flags & 2 != 0,
        enable_hcg_high: flags & 4 != 0,
        enable_miw: flags & 8 != 0,
        aux_in_objective: rng.random_bool(0.5),
        delta: rng.random_range(0.0..=1.0),
        strategy: crate::fusion::WeightingStrategy::ALL[rng.random_range(0..3)],
        ..RunConfig::default()
    };
    let cache = forward(&model, &sample, &run)?;
    let grads = backward(&model, &cache, &run)?;
    let frozen = cache.detached.clone();
    let f = Box::new(move |v: &[f64]| {
        let mut m = model.clone();
        m.set_flat(v).expect("sized");
        forward_frozen(&m, &sample, &run, &frozen).map_or(f64::NAN, |c| c.total_loss(&run))
    });
    Ok((f, flat, grads.total.to_flat()))
}

#[derive(Clone, Copy, Debug)]
pub struct BatteryConfig {
    pub instances: usize,
    pub seed: u64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0x5eed,
        }
    }
}

/// Runs every check in a fixed order.
pub fn run_battery(cfg: &BatteryConfig) -> Result<Vec<CheckSummary>> {
    let n = cfg.instances;
    let seed = |k: u64| derive_seed(&[cfg.seed, k]);
    let mut out = Vec::new();

    out.push(run_check("conv1x1 input+weights", SMOOTH_REL_TOL, n, seed(1), |rng| {
        let (c, h, w) = rand_dims(rng);
        let c_out = rng.random_range(1..=3);
        let f = rand_map(rng, c, h, w);
        let wm = Matrix::new(c_out, c, rand_vec(rng, c_out * c))?;
        let up = rand_map(rng, c_out, h, w);
        let g = conv1x1_backward(&f, &wm, &up)?;
        let mut x = f.data().to_vec();
        x.extend_from_slice(wm.data());
        let mut analytic = g.input.into_data();
        analytic.extend(g.weights);
        let fun = Box::new(move |v: &[f64]| {
            let split = c * h * w;
            let fm = FeatureMap::new(c, h, w, v[..split].to_vec()).expect("sized");
            let wm = Matrix::new(c_out, c, v[split..].to_vec()).expect("sized");
            let out = conv1x1(&fm, &wm, &vec![0.0; c_out]).expect("shapes");
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        Ok((fun as Box<dyn Fn(&[f64]) -> f64>, x, analytic))
    })?);

    out.push(run_check("conv3x3 input+weights", SMOOTH_REL_TOL, n, seed(2), |rng| {
        let (c, h, w) = rand_dims(rng);
        let c_out = rng.random_range(1..=3);
        let f = rand_map(rng, c, h, w);
        let k = Kernel3x3::new(c_out, c, rand_vec(rng, c_out * c * 9))?;
        let up = rand_map(rng, c_out, h, w);
        let g = conv3x3_backward(&f, &k, &up)?;
        let mut x = f.data().to_vec();
        x.extend_from_slice(k.data());
        let mut analytic = g.input.into_data();
        analytic.extend(g.weights);
        let fun = Box::new(move |v: &[f64]| {
            let split = c * h * w;
            let fm = FeatureMap::new(c, h, w, v[..split].to_vec()).expect("sized");
            let k = Kernel3x3::new(c_out, c, v[split..].to_vec()).expect("sized");
            let out = conv3x3(&fm, &k, &vec![0.0; c_out]).expect("shapes");
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        Ok((fun as Box<dyn Fn(&[f64]) -> f64>, x, analytic))
    })?);

    out.push(run_check("aux_loss_grad (features)", SMOOTH_REL_TOL, n, seed(3), |rng| {
        let (c, h, w) = rand_dims(rng);
        let f = rand_map(rng, c, h, w);
        let g = AuxDetector::new(rand_vec(rng, c), rng.random_range(-1.0..1.0))?;
        let gt = rand_gt(rng, h, w);
        let analytic = aux_loss_grad(&f, &g, &gt)?.into_data();
        let fun = map_fn(f.shape(), move |m| aux_loss(m, &g, &gt).unwrap_or(f64::NAN));
        Ok((fun, f.into_data(), analytic))
    })?);

    out.push(run_check("aux_loss (detector params)", SMOOTH_REL_TOL, n, seed(4), |rng| {
        let (c, h, w) = rand_dims(rng);
        let f = rand_map(rng, c, h, w);
        let g = AuxDetector::new(rand_vec(rng, c), rng.random_range(-1.0..1.0))?;
        let gt = rand_gt(rng, h, w);
        let (mut analytic, gb) = aux_loss_param_grad(&f, &g, &gt)?;
        analytic.push(gb);
        let mut x = g.weights.data().to_vec();
        x.push(g.bias);
        let fun = Box::new(move |v: &[f64]| {
            let g = AuxDetector::new(v[..c].to_vec(), v[c]).expect("sized");
            aux_loss(&f, &g, &gt).unwrap_or(f64::NAN)
        });
        Ok((fun as Box<dyn Fn(&[f64]) -> f64>, x, analytic))
    })?);

    out.push(run_check("loss_rw student", SMOOTH_REL_TOL, n, seed(5), |rng| distill_term(rng, loss_rw))?);
    out.push(run_check("loss_da student", SMOOTH_REL_TOL, n, seed(6), |rng| distill_term(rng, loss_da))?);
    out.push(run_check("loss_struct student", PIECEWISE_REL_TOL, n, seed(7), |rng| {
        distill_term(rng, loss_struct)
    })?);

    out.push(run_check("loss_distill student", PIECEWISE_REL_TOL, n, seed(8), |rng| {
        let (c, h, w) = rand_dims(rng);
        let s = rand_map(rng, c, h, w);
        let t = rand_map(rng, c, h, w);
        let wts = DistillWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0))?;
        let scale = rng.random_range(0.1..1.0);
        let analytic = loss_distill_with_scale(&s, &t, &wts, scale)?.grad_student.into_data();
        let fun = map_fn(s.shape(), move |m| {
            loss_distill_with_scale(m, &t, &wts, scale).map_or(f64::NAN, |r| r.loss)
        });
        Ok((fun, s.into_data(), analytic))
    })?);

    out.push(run_check("low-level guidance (features+params)", PIECEWISE_REL_TOL, n, seed(9), |rng| {
        let (c, h, w) = rand_dims(rng);
        let d = rng.random_range(1..=c);
        let f_non = rand_map(rng, c, h, w);
        let f_dom = rand_map(rng, c, h, w);
        let proj = QKProjection::new(Matrix::new(d, c, rand_vec(rng, d * c))?, Matrix::new(d, c, rand_vec(rng, d * c))?)?;
        let block = RefineBlock::new(Kernel3x3::new(c, c, rand_vec(rng, c * c * 9))?, rand_vec(rng, c))?;
        let up = rand_map(rng, c, h, w);
        let cache = LowLevelCache::forward(&f_non, &f_dom, &proj, &block)?;
        let g = cache.backward(&proj, &block, &up)?;
        let sizes = [c * h * w, c * h * w, d * c, d * c, c * c * 9, c];
        let x: Vec<f64> = [
            f_non.data(),
            f_dom.data(),
            proj.w_q.data(),
            proj.w_k.data(),
            block.kernel.data(),
            &block.bias[..],
        ]
        .concat();
        let analytic: Vec<f64> =
            [g.f_non.data(), g.f_dom.data(), g.w_q.data(), g.w_k.data(), &g.kernel[..], &g.bias[..]].concat();
        let fun = Box::new(move |v: &[f64]| {
            let mut parts = Vec::new();
            let mut off = 0;
            for s in sizes {
                parts.push(v[off..off + s].to_vec());
                off += s;
            }
            let fm = |p: &Vec<f64>| FeatureMap::new(c, h, w, p.clone()).expect("sized");
            let proj = QKProjection {
                w_q: Matrix::new(d, c, parts[2].clone()).expect("sized"),
                w_k: Matrix::new(d, c, parts[3].clone()).expect("sized"),
            };
            let block = RefineBlock {
                kernel: Kernel3x3::new(c, c, parts[4].clone()).expect("sized"),
                bias: parts[5].clone(),
            };
            LowLevelCache::forward(&fm(&parts[0]), &fm(&parts[1]), &proj, &block).map_or(f64::NAN, |l| {
                l.output.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            })
        });
        Ok((fun as Box<dyn Fn(&[f64]) -> f64>, x, analytic))
    })?);

    for flags in 0..16u8 {
        let name = format!(
            "end-to-end [mdi={} low={} high={} miw={}]",
            flags & 1,
            (flags >> 1) & 1,
            (flags >> 2) & 1,
            (flags >> 3) & 1
        );
        out.push(run_check(&name, PIECEWISE_REL_TOL, n, seed(100 + flags as u64), |rng| {
            end_to_end(rng, flags)
        })?);
    }
    Ok(out)
}
