//! Examples, labeled/unlabeled pools, splitting, masking, synthetic
//! generation and on-disk formats.

mod io;
mod split;
mod synthetic;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_pgm, save_dataset, write_pgm};
pub use split::{mask_labels, stratified_split, SplitSpec};
pub use synthetic::{
    generate_synthetic, generate_synthetic_raster, ClassCounts, ImbalanceProfile, RasterSyntheticSpec, SyntheticSpec,
    ISIC2018_COUNTS,
};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "raster {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Vector(Vec<f64>),
    Raster(Raster),
}

impl Payload {
    /// Flattened feature values.
    pub fn values(&self) -> &[f64] {
        match self {
            Payload::Vector(v) => v,
            Payload::Raster(r) => &r.values,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub payload: Payload,
    pub label: Option<usize>,
}

impl Example {
    pub fn labeled(id: u64, payload: Payload, label: usize) -> Self {
        Self {
            id,
            payload,
            label: Some(label),
        }
    }
}

/// A labeled dataset together with its declared class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("at least 2 classes required, got {num_classes}")));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id) {
                return Err(Error::Validation(format!("duplicate example id {}", ex.id)));
            }
            match ex.label {
                Some(l) if l >= num_classes => {
                    return Err(Error::Validation(format!(
                        "example {} has label {l} but only {num_classes} classes are declared",
                        ex.id
                    )))
                }
                None => return Err(Error::Validation(format!("example {} is unlabeled", ex.id))),
                _ => {}
            }
            if !ex.payload.is_finite() {
                return Err(Error::Validation(format!("example {} has non-finite payload", ex.id)));
            }
        }
        Ok(Self { num_classes, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.examples, self.num_classes)
    }
}

/// Per-class label counts; unlabeled examples are ignored.
pub fn class_counts(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for l in examples.iter().filter_map(|e| e.label) {
        counts[l] += 1;
    }
    counts
}

/// Where a labeled example's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    OriginalLabel,
    PseudoLabel { iteration: usize },
}

/// An example whose label has been withheld from training.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledExample {
    example: Example,
    audit_label: Option<usize>,
}

impl UnlabeledExample {
    /// Strips the label from `example`, keeping it only as an audit value.
    pub fn from_masked(mut example: Example) -> Self {
        let audit_label = example.label.take();
        Self { example, audit_label }
    }

    /// The training view: the label is always `None`.
    pub fn example(&self) -> &Example {
        &self.example
    }

    pub fn id(&self) -> u64 {
        self.example.id
    }

    /// Withheld ground truth. Diagnostics only (pseudo-label precision);
    /// never read by training code.
    pub fn audit_label(&self) -> Option<usize> {
        self.audit_label
    }

    pub(crate) fn into_parts(self) -> (Example, Option<usize>) {
        (self.example, self.audit_label)
    }
}

/// Labeled pool `D_L` with per-entry provenance, and unlabeled pool `D_U`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPools {
    num_classes: usize,
    labeled: Vec<Example>,
    provenance: Vec<Provenance>,
    unlabeled: Vec<UnlabeledExample>,
}

impl DatasetPools {
    /// Builds pools whose labeled entries are all original labels.
    pub fn new(num_classes: usize, labeled: Vec<Example>, unlabeled: Vec<UnlabeledExample>) -> Result<Self> {
        let provenance = vec![Provenance::OriginalLabel; labeled.len()];
        Self::with_provenance(num_classes, labeled, provenance, unlabeled)
    }

    pub fn with_provenance(
        num_classes: usize,
        labeled: Vec<Example>,
        provenance: Vec<Provenance>,
        unlabeled: Vec<UnlabeledExample>,
    ) -> Result<Self> {
        if provenance.len() != labeled.len() {
            return Err(Error::InvalidState("provenance length mismatch".into()));
        }
        let mut ids = HashSet::with_capacity(labeled.len() + unlabeled.len());
        for ex in &labeled {
            match ex.label {
                Some(l) if l < num_classes => {}
                _ => {
                    return Err(Error::InvalidState(format!(
                        "labeled example {} lacks a valid label",
                        ex.id
                    )))
                }
            }
            if !ids.insert(ex.id) {
                return Err(Error::InvalidState(format!("duplicate id {}", ex.id)));
            }
        }
        for u in &unlabeled {
            if u.example.label.is_some() {
                return Err(Error::InvalidState(format!(
                    "unlabeled example {} carries a label",
                    u.id()
                )));
            }
            if !ids.insert(u.id()) {
                return Err(Error::InvalidState(format!("id {} present in both pools", u.id())));
            }
        }
        Ok(Self {
            num_classes,
            labeled,
            provenance,
            unlabeled,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labeled(&self) -> &[Example] {
        &self.labeled
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn unlabeled(&self) -> &[UnlabeledExample] {
        &self.unlabeled
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        class_counts(&self.labeled, self.num_classes)
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Drops the unlabeled pool (fully supervised view).
    pub fn without_unlabeled(&self) -> Self {
        Self {
            num_classes: self.num_classes,
            labeled: self.labeled.clone(),
            provenance: self.provenance.clone(),
            unlabeled: Vec::new(),
        }
    }

    pub(crate) fn into_parts(self) -> (usize, Vec<Example>, Vec<Provenance>, Vec<UnlabeledExample>) {
        (self.num_classes, self.labeled, self.provenance, self.unlabeled)
    }

    /// Count of labeled entries per provenance iteration (0 = original).
    pub fn provenance_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for p in &self.provenance {
            let k = match p {
                Provenance::OriginalLabel => 0,
                Provenance::PseudoLabel { iteration } => *iteration,
            };
            *h.entry(k).or_insert(0) += 1;
        }
        h
    }
}

/// Stacks vector payloads into a design matrix; every payload must have the
/// same length.
pub fn payload_matrix<'a>(payloads: impl IntoIterator<Item = &'a Payload>) -> Result<crate::numkernel::Matrix> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for p in payloads {
        let v = p.values();
        match width {
            None => width = Some(v.len()),
            Some(w) if w != v.len() => {
                return Err(Error::InvalidInput(format!(
                    "payload width {} differs from {w}",
                    v.len()
                )))
            }
            _ => {}
        }
        values.extend_from_slice(v);
        rows += 1;
    }
    crate::numkernel::Matrix::from_vec(rows, width.unwrap_or(0), values)
}
