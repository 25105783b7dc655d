use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Payload, Raster};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// Class sizes of the ISIC 2018 dermoscopy collection, in the order
/// melanoma, nevus, basal cell carcinoma, actinic keratosis, benign
/// keratosis, dermatofibroma, vascular lesion.
pub const ISIC2018_COUNTS: [usize; 7] = [1103, 6716, 529, 325, 1087, 120, 135];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceProfile {
    Isic2018,
}

impl ImbalanceProfile {
    pub fn counts(self) -> &'static [usize] {
        match self {
            ImbalanceProfile::Isic2018 => &ISIC2018_COUNTS,
        }
    }
}

/// Per-class sizes, either explicit or a built-in profile scaled down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassCounts {
    Explicit(Vec<usize>),
    Profile {
        profile: ImbalanceProfile,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ClassCounts {
    /// Resolved counts; scaled profile entries are rounded and kept ≥ 1.
    pub fn resolve(&self) -> Result<Vec<usize>> {
        match self {
            ClassCounts::Explicit(c) => Ok(c.clone()),
            ClassCounts::Profile { profile, scale } => {
                if scale.is_nan() || *scale <= 0.0 {
                    return Err(Error::Config(format!("profile scale must be positive, got {scale}")));
                }
                Ok(profile
                    .counts()
                    .iter()
                    .map(|&n| ((n as f64 * scale).round() as usize).max(1))
                    .collect())
            }
        }
    }
}

/// Isotropic Gaussian blobs.
///
/// When `dimension ≥ num_classes` the class means sit on scaled coordinate
/// axes so every pair of means is exactly `separation` apart; otherwise
/// they are random directions of the same norm. Each coordinate gets
/// independent `N(0, noise²)` noise, so `separation / noise` controls how
/// separable the classes are (Bayes error grows as the ratio shrinks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub counts: ClassCounts,
    pub dimension: usize,
    pub separation: f64,
    #[serde(default = "one")]
    pub noise: f64,
}

impl SyntheticSpec {
    /// The standard 4-class benchmark shape (600/150/150/100, 16 features).
    pub fn blobs4(separation: f64) -> Self {
        Self {
            counts: ClassCounts::Explicit(vec![600, 150, 150, 100]),
            dimension: 16,
            separation,
            noise: 1.0,
        }
    }

    fn validate(&self) -> Result<Vec<usize>> {
        let counts = self.counts.resolve()?;
        if counts.len() < 2 {
            return Err(Error::Config("at least 2 classes required".into()));
        }
        if counts.contains(&0) {
            return Err(Error::Config("every class count must be ≥ 1".into()));
        }
        if self.dimension < 2 {
            return Err(Error::Config(format!("dimension must be ≥ 2, got {}", self.dimension)));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(counts)
    }
}

const CENTER_STREAM: u64 = 0xce;
const SAMPLE_STREAM: u64 = 0x5a;
const ORDER_STREAM: u64 = 0x0d;

fn class_means(num_classes: usize, dim: usize, separation: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= num_classes {
                m[c] = radius;
            } else {
                for v in m.iter_mut() {
                    *v = rng.normal();
                }
                let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in m.iter_mut() {
                    *v *= radius / norm;
                }
            }
            m
        })
        .collect()
}

/// Draws a labeled blob dataset; ids are `0..n` in a shuffled class order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let counts = spec.validate()?;
    let root = RngStream::new(seed, 0);
    let means = class_means(
        counts.len(),
        spec.dimension,
        spec.separation,
        &mut root.derive(&[CENTER_STREAM]),
    );
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    root.derive(&[ORDER_STREAM]).shuffle(&mut labels);
    let mut sampler = root.derive(&[SAMPLE_STREAM]);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let x = means[c].iter().map(|m| m + spec.noise * sampler.normal()).collect();
            Example::labeled(i as u64, Payload::Vector(x), c)
        })
        .collect();
    Dataset::new(counts.len(), examples)
}

/// Ring images: class `c` draws a bright ring whose radius grows with `c`,
/// plus pixel noise. Rings are invariant under right-angle rotations and
/// flips, so the raster augmentations preserve the class signal. Pixel
/// values are quantized to 8 bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterSyntheticSpec {
    pub counts: ClassCounts,
    pub height: usize,
    pub width: usize,
    #[serde(default = "RasterSyntheticSpec::default_noise")]
    pub noise: f64,
}

impl RasterSyntheticSpec {
    fn default_noise() -> f64 {
        0.1
    }
}

pub fn generate_synthetic_raster(spec: &RasterSyntheticSpec, seed: u64) -> Result<Dataset> {
    let counts = spec.counts.resolve()?;
    if counts.len() < 2 || counts.contains(&0) {
        return Err(Error::Config("need ≥ 2 classes with ≥ 1 example each".into()));
    }
    if spec.height < 4 || spec.width < 4 {
        return Err(Error::Config("raster must be at least 4x4".into()));
    }
    if spec.noise.is_nan() || spec.noise < 0.0 {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let nc = counts.len();
    let root = RngStream::new(seed, 1);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    root.derive(&[ORDER_STREAM]).shuffle(&mut labels);
    let mut sampler = root.derive(&[SAMPLE_STREAM]);
    let (h, w) = (spec.height, spec.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let max_r = cy.min(cx);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let radius = max_r * (c as f64 + 1.0) / (nc as f64 + 1.0);
            let mut values = Vec::with_capacity(h * w);
            for r in 0..h {
                for col in 0..w {
                    let d = ((r as f64 - cy).powi(2) + (col as f64 - cx).powi(2)).sqrt();
                    let signal = (-(d - radius).powi(2) / 1.5).exp();
                    let v = (0.1 + 0.8 * signal + spec.noise * sampler.normal()).clamp(0.0, 1.0);
                    values.push((v * 255.0).round() / 255.0);
                }
            }
            Example::labeled(
                i as u64,
                Payload::Raster(Raster {
                    height: h,
                    width: w,
                    values,
                }),
                c,
            )
        })
        .collect();
    Dataset::new(nc, examples)
}
