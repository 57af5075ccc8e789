//! Seeded synthetic two-modality scenes.
//!
//! Modality A ("RGB-like") sees objects sharply and with little noise but
//! also shows unlabelled distractor texture. Modality B ("IR-like") sees
//! only the objects, but blurred, shifted and noisy.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdi::GroundTruthMask;
use crate::tensor::FeatureMap;

/// Folds a list of integers into one seed with SplitMix64 steps.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x6a09_e667_f3bc_c908_u64;
    for &p in parts {
        let mut rng = SplitMix64::seed_from_u64(acc ^ p);
        acc = rng.random::<u64>();
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Half-extent range of object blobs, in pixels.
    pub blob_radius_min: usize,
    pub blob_radius_max: usize,
    pub contrast_a: f64,
    pub contrast_b: f64,
    pub noise_a: f64,
    pub noise_b: f64,
    /// Box-blur radius applied to modality B.
    pub blur_b: usize,
    /// Shift of modality B relative to the ground truth, `(dy, dx)`.
    pub offset_b: (i32, i32),
    /// Amplitude of the distractor texture added to modality A.
    pub texture_a: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
}

impl GeneratorConfig {
    /// Modality A carries more usable signal than modality B.
    pub fn a_dominant() -> Self {
        Self {
            height: 10,
            width: 10,
            blobs_min: 1,
            blobs_max: 2,
            blob_radius_min: 1,
            blob_radius_max: 2,
            contrast_a: 1.0,
            contrast_b: 0.4,
            noise_a: 0.05,
            noise_b: 0.1,
            blur_b: 1,
            offset_b: (1, 0),
            texture_a: 0.8,
            distractors_min: 1,
            distractors_max: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::invalid(format!(
                "image must be at least 3x3, got {}x{}",
                self.height, self.width
            )));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::invalid("blob count range must be 1 <= min <= max"));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::invalid("distractor count range must be min <= max"));
        }
        if self.blob_radius_min > self.blob_radius_max
            || 2 * self.blob_radius_max + 1 > self.height.min(self.width)
        {
            return Err(Error::invalid("blob radius range does not fit the image"));
        }
        let amps = [self.contrast_a, self.contrast_b, self.noise_a, self.noise_b, self.texture_a];
        if amps.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("contrast, noise and texture must be finite and >= 0"));
        }
        Ok(())
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::a_dominant()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub mod_a: FeatureMap,
    pub mod_b: FeatureMap,
    pub gt: GroundTruthMask,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Disc,
}

fn stamp_blob(rng: &mut SplitMix64, cfg: &GeneratorConfig, map: &mut [f64]) {
    let (h, w) = (cfg.height, cfg.width);
    let ry = rng.random_range(cfg.blob_radius_min..=cfg.blob_radius_max);
    let rx = rng.random_range(cfg.blob_radius_min..=cfg.blob_radius_max);
    let cy = rng.random_range(ry..h - ry);
    let cx = rng.random_range(rx..w - rx);
    let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Disc };
    for y in cy - ry..=cy + ry {
        for x in cx - rx..=cx + rx {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Disc => {
                    let dy = (y as f64 - cy as f64) / (ry as f64 + 0.5);
                    let dx = (x as f64 - cx as f64) / (rx as f64 + 0.5);
                    dy * dy + dx * dx <= 1.0
                }
            };
            if inside {
                map[y * w + x] = 1.0;
            }
        }
    }
}

fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut count = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += src[yy as usize * w + xx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y as usize * w + x as usize] = acc / count;
        }
    }
    out
}

fn shift(src: &[f64], h: usize, w: usize, (dy, dx): (i32, i32)) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sy, sx) = (y - dy as i64, x - dx as i64);
            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                out[y as usize * w + x as usize] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Deterministic sample for `(cfg, seed)`.
pub fn gen_sample(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = SplitMix64::seed_from_u64(seed);

    let mut gt = vec![0.0; h * w];
    for _ in 0..rng.random_range(cfg.blobs_min..=cfg.blobs_max) {
        stamp_blob(&mut rng, cfg, &mut gt);
    }
    let mut distract = vec![0.0; h * w];
    for _ in 0..rng.random_range(cfg.distractors_min..=cfg.distractors_max) {
        stamp_blob(&mut rng, cfg, &mut distract);
    }

    let mut a = vec![0.0; h * w];
    for i in 0..h * w {
        let texture = cfg.texture_a * distract[i] * (1.0 - gt[i]);
        let noise: f64 = rng.sample(StandardNormal);
        a[i] = (cfg.contrast_a * gt[i] + texture + cfg.noise_a * noise).clamp(0.0, 1.0);
    }

    let scaled: Vec<f64> = gt.iter().map(|v| cfg.contrast_b * v).collect();
    let mut b = shift(&box_blur(&scaled, h, w, cfg.blur_b), h, w, cfg.offset_b);
    for v in b.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *v = (*v + cfg.noise_b * noise).clamp(0.0, 1.0);
    }

    Ok(SyntheticSample {
        mod_a: FeatureMap::new(1, h, w, a)?,
        mod_b: FeatureMap::new(1, h, w, b)?,
        gt: GroundTruthMask::new(h, w, gt)?,
        seed,
    })
}
