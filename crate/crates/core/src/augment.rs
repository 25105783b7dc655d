//! Stochastic input transforms.
//!
//! Raster payloads follow the usual dermoscopy-style pipeline: aspect
//! preserving resize to a fixed height, a square crop (center for weak and
//! eval, uniformly placed for strong), a right-angle rotation, independent
//! horizontal and vertical flips, then normalization. Vector payloads use
//! additive Gaussian noise (weak and strong) plus feature dropout (strong)
//! around the same normalization step.
//!
//! A transform never touches the random stream when its stochastic
//! parameters leave only one possible outcome.

use serde::{Deserialize, Serialize};

use crate::data::{Example, Payload, Raster};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Weak,
    Strong,
    Eval,
}

/// Resize-then-crop geometry for raster payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// Target height; width follows the aspect ratio.
    pub resize_height: usize,
    /// Side of the square crop.
    pub crop: usize,
}

impl Geometry {
    fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize_height {
            return Err(Error::Config(format!(
                "crop size {} must be in 1..={}",
                self.crop, self.resize_height
            )));
        }
        Ok(())
    }
}

/// Configurable part of a weak or strong policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Allowed rotations in quarter turns (each in 0..4), drawn uniformly.
    #[serde(default = "AugmentParams::all_rotations")]
    pub rotations: Vec<u8>,
    /// Probability of each of the horizontal and vertical flips.
    #[serde(default = "AugmentParams::half")]
    pub flip_prob: f64,
    /// Standard deviation of additive Gaussian noise (raw feature units).
    #[serde(default)]
    pub noise: f64,
    /// Probability of zeroing each normalized feature (vector payloads).
    #[serde(default)]
    pub feature_drop: f64,
}

impl AugmentParams {
    fn all_rotations() -> Vec<u8> {
        vec![0, 1, 2, 3]
    }

    fn half() -> f64 {
        0.5
    }

    /// Parameters that leave every input untouched.
    pub fn identity() -> Self {
        Self {
            rotations: vec![0],
            flip_prob: 0.0,
            noise: 0.0,
            feature_drop: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(Error::Config(format!(
                "rotations must be a non-empty subset of 0..=3, got {:?}",
                self.rotations
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("feature_drop", self.feature_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Weak and strong parameters plus the shared raster geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub geometry: Option<Geometry>,
    #[serde(default = "AugmentConfig::default_weak")]
    pub weak: AugmentParams,
    #[serde(default = "AugmentConfig::default_strong")]
    pub strong: AugmentParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            geometry: None,
            weak: Self::default_weak(),
            strong: Self::default_strong(),
        }
    }
}

impl AugmentConfig {
    fn default_weak() -> AugmentParams {
        AugmentParams {
            noise: 0.1,
            ..AugmentParams::identity()
        }
        .with_image_defaults()
    }

    fn default_strong() -> AugmentParams {
        AugmentParams {
            noise: 0.3,
            feature_drop: 0.1,
            ..AugmentParams::identity()
        }
        .with_image_defaults()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.geometry {
            g.validate()?;
        }
        self.weak.validate()?;
        self.strong.validate()?;
        if self.strong.noise < self.weak.noise || self.strong.feature_drop < self.weak.feature_drop {
            return Err(Error::Config(
                "strong augmentation must perturb at least as much as weak".into(),
            ));
        }
        Ok(())
    }

    /// Builds the three runtime policies around fitted statistics.
    pub fn policies(&self, stats: &Normalizer) -> Result<PolicySet> {
        self.validate()?;
        Ok(PolicySet {
            weak: AugmentationPolicy::new(AugmentKind::Weak, self.geometry, self.weak.clone(), stats.clone())?,
            strong: AugmentationPolicy::new(AugmentKind::Strong, self.geometry, self.strong.clone(), stats.clone())?,
            eval: AugmentationPolicy::eval(self.geometry, stats.clone())?,
        })
    }
}

impl AugmentParams {
    fn with_image_defaults(mut self) -> Self {
        self.rotations = Self::all_rotations();
        self.flip_prob = 0.5;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
    pub eval: AugmentationPolicy,
}

/// Fitted normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Normalizer {
    PerFeature { mean: Vec<f64>, std: Vec<f64> },
    Global { mean: f64, std: f64 },
}

impl Normalizer {
    fn apply(&self, values: &mut [f64]) -> Result<()> {
        match self {
            Normalizer::PerFeature { mean, std } => {
                if mean.len() != values.len() {
                    return Err(Error::InvalidInput(format!(
                        "normalizer fitted on {} features, payload has {}",
                        mean.len(),
                        values.len()
                    )));
                }
                for ((v, m), s) in values.iter_mut().zip(mean).zip(std) {
                    *v = (*v - m) / s;
                }
            }
            Normalizer::Global { mean, std } => {
                for v in values.iter_mut() {
                    *v = (*v - mean) / std;
                }
            }
        }
        Ok(())
    }
}

/// Per-feature statistics for vector pools, one global mean/std for
/// raster pools. Standard deviations are floored at [`STD_FLOOR`].
pub fn fit_normalizer(pool: &[Example]) -> Result<Normalizer> {
    let first = pool
        .first()
        .ok_or_else(|| Error::Config("cannot fit normalizer on an empty pool".into()))?;
    match &first.payload {
        Payload::Vector(x) => {
            let d = x.len();
            let n = pool.len() as f64;
            let mut mean = vec![0.0; d];
            for e in pool {
                let Payload::Vector(x) = &e.payload else {
                    return Err(Error::InvalidInput("mixed payload kinds".into()));
                };
                if x.len() != d {
                    return Err(Error::InvalidInput(format!("example {} has width {}", e.id, x.len())));
                }
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; d];
            for e in pool {
                for ((s, v), m) in var.iter_mut().zip(e.payload.values()).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
            Ok(Normalizer::PerFeature { mean, std })
        }
        Payload::Raster(_) => {
            let mut count = 0usize;
            let mut sum = 0.0;
            for e in pool {
                let Payload::Raster(r) = &e.payload else {
                    return Err(Error::InvalidInput("mixed payload kinds".into()));
                };
                count += r.values.len();
                sum += r.values.iter().sum::<f64>();
            }
            let mean = sum / count as f64;
            let ss: f64 = pool
                .iter()
                .flat_map(|e| e.payload.values())
                .map(|v| (v - mean) * (v - mean))
                .sum();
            Ok(Normalizer::Global {
                mean,
                std: (ss / count as f64).sqrt().max(STD_FLOOR),
            })
        }
    }
}

/// A concrete transform α(·): kind, geometry, stochastic parameters and
/// normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    kind: AugmentKind,
    geometry: Option<Geometry>,
    params: AugmentParams,
    stats: Normalizer,
}

impl AugmentationPolicy {
    pub fn new(
        kind: AugmentKind,
        geometry: Option<Geometry>,
        params: AugmentParams,
        stats: Normalizer,
    ) -> Result<Self> {
        if let Some(g) = &geometry {
            g.validate()?;
        }
        params.validate()?;
        let params = if kind == AugmentKind::Eval {
            AugmentParams::identity()
        } else {
            params
        };
        Ok(Self {
            kind,
            geometry,
            params,
            stats,
        })
    }

    pub fn eval(geometry: Option<Geometry>, stats: Normalizer) -> Result<Self> {
        Self::new(AugmentKind::Eval, geometry, AugmentParams::identity(), stats)
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn params(&self) -> &AugmentParams {
        &self.params
    }

    pub fn stats(&self) -> &Normalizer {
        &self.stats
    }

    fn expect(&self, kind: AugmentKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidParameter(format!(
                "policy of kind {:?} used as {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Flattened length of a transformed payload, given the raw length
    /// (vectors) or raw shape (rasters).
    pub fn output_len(&self, payload: &Payload) -> usize {
        match (payload, &self.geometry) {
            (Payload::Raster(_), Some(g)) => g.crop * g.crop,
            (p, _) => p.len(),
        }
    }
}

pub fn weak_augment(example: &Example, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Example> {
    policy.expect(AugmentKind::Weak)?;
    transform(example, policy, Some(rng))
}

pub fn strong_augment(example: &Example, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Example> {
    policy.expect(AugmentKind::Strong)?;
    transform(example, policy, Some(rng))
}

/// Deterministic test-time transform: geometry and normalization only.
pub fn eval_transform(example: &Example, policy: &AugmentationPolicy) -> Result<Example> {
    policy.expect(AugmentKind::Eval)?;
    transform(example, policy, None)
}

/// Dispatches on the policy kind.
pub fn apply(example: &Example, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Example> {
    match policy.kind {
        AugmentKind::Eval => transform(example, policy, None),
        _ => transform(example, policy, Some(rng)),
    }
}

fn transform(example: &Example, policy: &AugmentationPolicy, mut rng: Option<&mut RngStream>) -> Result<Example> {
    let p = &policy.params;
    let payload = match &example.payload {
        Payload::Vector(x) => {
            let mut x = x.clone();
            if let Some(rng) = rng.as_deref_mut() {
                if p.noise > 0.0 {
                    for v in x.iter_mut() {
                        *v += p.noise * rng.normal();
                    }
                }
            }
            policy.stats.apply(&mut x)?;
            if let Some(rng) = rng.as_deref_mut() {
                if p.feature_drop > 0.0 {
                    for v in x.iter_mut() {
                        if rng.bernoulli(p.feature_drop) {
                            *v = 0.0;
                        }
                    }
                }
            }
            Payload::Vector(x)
        }
        Payload::Raster(r) => {
            let mut img = match &policy.geometry {
                Some(g) => {
                    let resized = resize_to_height(r, g.resize_height);
                    if resized.width < g.crop || resized.height < g.crop {
                        return Err(Error::Config(format!(
                            "example {}: {}x{} after resize is smaller than crop {}",
                            example.id, resized.height, resized.width, g.crop
                        )));
                    }
                    let (top, left) = match (&policy.kind, rng.as_deref_mut()) {
                        (AugmentKind::Strong, Some(rng)) => (
                            draw_offset(rng, resized.height - g.crop),
                            draw_offset(rng, resized.width - g.crop),
                        ),
                        _ => ((resized.height - g.crop) / 2, (resized.width - g.crop) / 2),
                    };
                    crop(&resized, top, left, g.crop, g.crop)
                }
                None => r.clone(),
            };
            if let Some(rng) = rng.as_mut() {
                let turns = if p.rotations.len() > 1 {
                    p.rotations[rng.below(p.rotations.len())]
                } else {
                    p.rotations[0]
                };
                if turns % 2 == 1 && img.height != img.width {
                    return Err(Error::Config(format!(
                        "example {}: odd quarter-turn rotation of a non-square {}x{} image",
                        example.id, img.height, img.width
                    )));
                }
                img = rotate_quarter(&img, turns);
                if draw_flip(rng, p.flip_prob) {
                    img = flip_horizontal(&img);
                }
                if draw_flip(rng, p.flip_prob) {
                    img = flip_vertical(&img);
                }
                if p.noise > 0.0 {
                    for v in img.values.iter_mut() {
                        *v += p.noise * rng.normal();
                    }
                }
            }
            policy.stats.apply(&mut img.values)?;
            Payload::Raster(img)
        }
    };
    Ok(Example {
        id: example.id,
        payload,
        label: example.label,
    })
}

fn draw_offset(rng: &mut RngStream, max: usize) -> usize {
    if max == 0 {
        0
    } else {
        rng.below(max + 1)
    }
}

fn draw_flip(rng: &mut RngStream, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.bernoulli(p)
    }
}

/// Bilinear, half-pixel-centered resize that keeps the aspect ratio.
pub fn resize_to_height(r: &Raster, height: usize) -> Raster {
    if r.height == height {
        return r.clone();
    }
    let width = ((r.width as f64 * height as f64 / r.height as f64).round() as usize).max(1);
    let sy = r.height as f64 / height as f64;
    let sx = r.width as f64 / width as f64;
    let coord = |i: usize, scale: f64, n: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let (y0, y1, wy) = coord(i, sy, r.height);
        for j in 0..width {
            let (x0, x1, wx) = coord(j, sx, r.width);
            let top = r.get(y0, x0) * (1.0 - wx) + r.get(y0, x1) * wx;
            let bot = r.get(y1, x0) * (1.0 - wx) + r.get(y1, x1) * wx;
            values.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Raster { height, width, values }
}

fn crop(r: &Raster, top: usize, left: usize, h: usize, w: usize) -> Raster {
    let mut values = Vec::with_capacity(h * w);
    for i in top..top + h {
        values.extend_from_slice(&r.values[i * r.width + left..i * r.width + left + w]);
    }
    Raster {
        height: h,
        width: w,
        values,
    }
}

/// Clockwise rotation by `turns` quarter turns.
fn rotate_quarter(r: &Raster, turns: u8) -> Raster {
    let (h, w) = (r.height, r.width);
    match turns % 4 {
        0 => r.clone(),
        2 => Raster {
            height: h,
            width: w,
            values: r.values.iter().rev().copied().collect(),
        },
        t => {
            let mut values = Vec::with_capacity(h * w);
            for i in 0..w {
                for j in 0..h {
                    values.push(if t == 1 {
                        r.get(h - 1 - j, i)
                    } else {
                        r.get(j, w - 1 - i)
                    });
                }
            }
            Raster {
                height: w,
                width: h,
                values,
            }
        }
    }
}

fn flip_horizontal(r: &Raster) -> Raster {
    let mut values = Vec::with_capacity(r.values.len());
    for row in r.values.chunks(r.width) {
        values.extend(row.iter().rev());
    }
    Raster { values, ..*r }
}

fn flip_vertical(r: &Raster) -> Raster {
    let mut values = Vec::with_capacity(r.values.len());
    for row in r.values.chunks(r.width).rev() {
        values.extend_from_slice(row);
    }
    Raster { values, ..*r }
}
