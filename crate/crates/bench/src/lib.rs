//! Deterministic inputs shared by the benchmarks.

use mdacl_core::hcg::QKProjection;
use mdacl_core::sim::{derive_seed, gen_sample, ModelSpec, ToyModel};
use mdacl_core::{FeatureMap, GeneratorConfig, Kernel3x3, Matrix, RunConfig, SyntheticSample};

/// Pseudo-random values in [-1, 1).
pub fn values(seed: u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (derive_seed(&[seed, i as u64]) >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        .collect()
}

pub fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, values(seed, c * h * w)).expect("valid shape")
}

pub fn kernel(seed: u64, c_out: usize, c_in: usize) -> Kernel3x3 {
    Kernel3x3::new(c_out, c_in, values(seed, c_out * c_in * 9)).expect("valid shape")
}

pub fn projection(seed: u64, d: usize, c: usize) -> QKProjection {
    let m = |s| Matrix::new(d, c, values(s, d * c)).expect("valid shape");
    QKProjection::new(m(seed), m(seed + 1)).expect("matching shapes")
}

/// Model, sample and config for a full training step with every component on.
pub fn step_fixture() -> (ToyModel, SyntheticSample, RunConfig) {
    let run = RunConfig::full();
    let model = ToyModel::init(ModelSpec::default(), 1, false).expect("default spec");
    let sample = gen_sample(&GeneratorConfig::a_dominant(), 2).expect("default generator");
    (model, sample, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_in_range_and_repeatable() {
        let v = values(3, 1000);
        assert!(v.iter().all(|x| (-1.0..1.0).contains(x)));
        assert_eq!(v, values(3, 1000));
        assert_ne!(v, values(4, 1000));
    }
}
