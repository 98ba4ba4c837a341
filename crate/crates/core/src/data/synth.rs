//! Deterministic organ/lesion blob generator.
//!
//! Each sample is a star-convex organ blob (radially perturbed ellipse) with
//! a smaller lesion blob fully inside it, distinct mean intensities, and
//! additive Gaussian noise. Sample `index` under a config seed is a pure
//! function, so generation parallelizes without affecting output.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{split_dataset, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::geometry::Mask2D;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Generator parameters. Radii are in pixels; intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub organ_radius: (f64, f64),
    pub lesion_radius: (f64, f64),
    pub organ_intensity: f64,
    pub lesion_intensity: f64,
    pub background_intensity: f64,
    pub noise_std: f64,
    /// Relative amplitude of the radial boundary perturbation.
    pub irregularity: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 64,
            organ_radius: (12.0, 20.0),
            lesion_radius: (3.0, 6.0),
            organ_intensity: 0.55,
            lesion_intensity: 0.8,
            background_intensity: 0.25,
            noise_std: 0.05,
            irregularity: 0.15,
            count: 100,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be >= 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        let (o0, o1) = self.organ_radius;
        let (l0, l1) = self.lesion_radius;
        if !(0.0 < o0 && o0 <= o1) || !(0.0 < l0 && l0 <= l1) {
            return Err(Error::InvalidConfig(format!(
                "radius ranges must be ordered and positive, got organ {:?}, lesion {:?}",
                self.organ_radius, self.lesion_radius
            )));
        }
        if l1 >= o0 {
            return Err(Error::InvalidConfig(format!(
                "lesion max radius {l1} must be < organ min radius {o0}"
            )));
        }
        for (name, v) in [
            ("organ_intensity", self.organ_intensity),
            ("lesion_intensity", self.lesion_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.noise_std < 0.0 || self.irregularity < 0.0 || self.irregularity > 0.5 {
            return Err(Error::InvalidConfig(
                "noise_std must be >= 0 and irregularity in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }

    /// Parameter echo for the dataset manifest.
    pub fn manifest_params(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("image_size".into(), self.image_size.to_string());
        p.insert("organ_radius".into(), format!("{}..{}", self.organ_radius.0, self.organ_radius.1));
        p.insert("lesion_radius".into(), format!("{}..{}", self.lesion_radius.0, self.lesion_radius.1));
        p.insert("organ_intensity".into(), self.organ_intensity.to_string());
        p.insert("lesion_intensity".into(), self.lesion_intensity.to_string());
        p.insert("background_intensity".into(), self.background_intensity.to_string());
        p.insert("noise_std".into(), self.noise_std.to_string());
        p.insert("irregularity".into(), self.irregularity.to_string());
        p.insert("count".into(), self.count.to_string());
        p
    }
}

const HARMONICS: usize = 4;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    amp: f64,
    coef: [f64; HARMONICS],
    phase: [f64; HARMONICS],
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rx: f64, ry: f64, amp: f64) -> Blob {
        let mut coef = [0.0; HARMONICS];
        let mut phase = [0.0; HARMONICS];
        for k in 0..HARMONICS {
            coef[k] = rng.random_range(-1.0..1.0);
            phase[k] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Blob {
            cx,
            cy,
            rx,
            ry,
            amp,
            coef,
            phase,
        }
    }

    /// Radial boundary factor at angle theta; stays positive for amp <= 0.5.
    fn boundary(&self, theta: f64) -> f64 {
        let mut wobble = 0.0;
        for k in 0..HARMONICS {
            wobble += self.coef[k] / HARMONICS as f64 * ((k + 1) as f64 * theta + self.phase[k]).cos();
        }
        1.0 + self.amp * wobble
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let rho = (dx * dx + dy * dy).sqrt();
        rho <= self.boundary(dy.atan2(dx))
    }

    fn rasterize(&self, size: usize) -> Mask2D {
        let mut mask = Mask2D::zeros(size, size);
        // scan only the bounding window of the maximal radius
        let max_r = (self.rx.max(self.ry)) * (1.0 + self.amp) + 1.0;
        let x0 = ((self.cx - max_r).floor().max(0.0)) as usize;
        let x1 = ((self.cx + max_r).ceil().min(size as f64)) as usize;
        let y0 = ((self.cy - max_r).floor().max(0.0)) as usize;
        let y1 = ((self.cy + max_r).ceil().min(size as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x, y) {
                    mask.set(x, y, 1);
                }
            }
        }
        mask
    }
}

const MAX_ATTEMPTS: u32 = 100;

/// Generate sample `index` of the configured dataset. Deterministic in
/// (config.seed, index); errors after 100 rejected geometries.
pub fn generate_synthetic_sample(config: &SyntheticConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let size = config.image_size;
    let mut rng = rng_for(config.seed, "synth-sample", index);

    for _ in 0..MAX_ATTEMPTS {
        let rx = rng.random_range(config.organ_radius.0..=config.organ_radius.1);
        let ry = rng.random_range(config.organ_radius.0..=config.organ_radius.1);
        let margin = rx.max(ry) * (1.0 + config.irregularity) + 2.0;
        if 2.0 * margin >= size as f64 {
            // organ cannot fit inside the image at this draw
            continue;
        }
        let cx = rng.random_range(margin..size as f64 - margin);
        let cy = rng.random_range(margin..size as f64 - margin);
        let organ = Blob::sample(&mut rng, cx, cy, rx, ry, config.irregularity);

        let lr = rng.random_range(config.lesion_radius.0..=config.lesion_radius.1);
        // place the lesion center inside the organ's guaranteed core
        let safe_rx = (rx * (1.0 - config.irregularity) - lr * (1.0 + config.irregularity) - 1.0).max(0.0);
        let safe_ry = (ry * (1.0 - config.irregularity) - lr * (1.0 + config.irregularity) - 1.0).max(0.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let rho: f64 = rng.random_range(0.0..1.0f64).sqrt();
        let lcx = cx + rho * safe_rx * angle.cos();
        let lcy = cy + rho * safe_ry * angle.sin();
        let lesion = Blob::sample(&mut rng, lcx, lcy, lr, lr, config.irregularity);

        let organ_mask = organ.rasterize(size);
        let lesion_mask = lesion.rasterize(size);
        if organ_mask.is_empty() || lesion_mask.is_empty() || !lesion_mask.subset_of(&organ_mask) {
            continue;
        }

        let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidConfig(format!("noise distribution: {e}")))?;
        let mut image = vec![0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let base = if lesion_mask.get(x, y) == 1 {
                    config.lesion_intensity
                } else if organ_mask.get(x, y) == 1 {
                    config.organ_intensity
                } else {
                    config.background_intensity
                };
                let n = if config.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                image[y * size + x] = (base + n).clamp(0.0, 1.0) as f32;
            }
        }

        let mut masks = BTreeMap::new();
        masks.insert(super::ROLE_ORGAN.to_string(), organ_mask);
        masks.insert(super::ROLE_LESION.to_string(), lesion_mask);
        let sample = Sample {
            case_id: format!("case_{index:05}"),
            image: Tensor::new(vec![size, size], image)?,
            masks,
        };
        sample.validate()?;
        return Ok(sample);
    }
    Err(Error::Infeasible {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generate the full dataset and its 70/15/15 manifest.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<(Vec<Sample>, DatasetManifest)> {
    config.validate()?;
    let samples: Vec<Sample> = (0..config.count as u64)
        .into_par_iter()
        .map(|i| generate_synthetic_sample(config, i))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.case_id.clone()).collect();
    let mut manifest = split_dataset(&ids, (0.70, 0.15, 0.15), config.seed)?;
    manifest.dataset = "synthetic".into();
    manifest.params = config.manifest_params();
    Ok((samples, manifest))
}
