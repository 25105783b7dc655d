use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetPools, Example, UnlabeledExample};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

const SPLIT_STREAM: u64 = 0x5317;
const MASK_STREAM: u64 = 0x3a5c;

/// Train/validation/test fractions and the labeled fraction of train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "SplitSpec::default_train")]
    pub train: f64,
    #[serde(default = "SplitSpec::default_val")]
    pub validation: f64,
    #[serde(default = "SplitSpec::default_test")]
    pub test: f64,
    /// Fraction of each training class that keeps its label.
    #[serde(default = "SplitSpec::default_labeled")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: Self::default_train(),
            validation: Self::default_val(),
            test: Self::default_test(),
            labeled_fraction: Self::default_labeled(),
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn default_train() -> f64 {
        0.7
    }
    fn default_val() -> f64 {
        0.1
    }
    fn default_test() -> f64 {
        0.2
    }
    fn default_labeled() -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.validation, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions out of [0,1]: {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1: {fr:?}")));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "labeled fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` over `fractions`, then at least
/// one item for every positive fraction while `n` allows it.
pub(crate) fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Stable sort keeps the lower index first on equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle().take(fractions.len() * 2) {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    // Minimum one per non-empty split, borrowed from the largest split.
    for i in 0..fractions.len() {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..sizes.len())
                .filter(|&j| sizes[j] > 1)
                .max_by_key(|&j| (sizes[j], std::cmp::Reverse(j)));
            if let Some(j) = donor {
                sizes[j] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

fn group_by_class(examples: &[Example], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, e) in examples.iter().enumerate() {
        if let Some(l) = e.label {
            groups[l].push(i);
        }
    }
    groups
}

/// Per-class stratified partition into (train, validation, test).
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let groups = group_by_class(&dataset.examples, dataset.num_classes);
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("class {c} has no examples")));
    }
    let root = RngStream::new(spec.seed, SPLIT_STREAM);
    let fractions = [spec.train, spec.validation, spec.test];
    let mut parts: [Vec<Example>; 3] = Default::default();
    for (c, mut idx) in groups.into_iter().enumerate() {
        root.derive(&[c as u64]).shuffle(&mut idx);
        let sizes = apportion(idx.len(), &fractions);
        let mut it = idx.into_iter();
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend(it.by_ref().take(size).map(|i| dataset.examples[i].clone()));
        }
    }
    for part in &mut parts {
        part.sort_by_key(|e| e.id);
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}

/// Keeps `round(p · n_c)` labels per class (at least one) and moves the
/// rest of `train` into the unlabeled pool.
pub fn mask_labels(train: &[Example], num_classes: usize, labeled_fraction: f64, seed: u64) -> Result<DatasetPools> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "labeled fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    if train.iter().any(|e| e.label.is_none()) {
        return Err(Error::InvalidInput("mask_labels needs a labeled pool".into()));
    }
    let root = RngStream::new(seed, MASK_STREAM);
    let mut keep = vec![false; train.len()];
    for (c, mut idx) in group_by_class(train, num_classes).into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let k = ((labeled_fraction * n as f64).round() as usize).clamp(1, n);
        root.derive(&[c as u64]).shuffle(&mut idx);
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (e, k) in train.iter().zip(keep) {
        if k {
            labeled.push(e.clone());
        } else {
            unlabeled.push(UnlabeledExample::from_masked(e.clone()));
        }
    }
    DatasetPools::new(num_classes, labeled, unlabeled)
}
