use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ensemble_logits_chunked, streams};
use crate::augment::{weak_augment, AugmentationPolicy};
use crate::data::{DatasetPools, Example, Provenance, UnlabeledExample};
use crate::ensemble::{ensemble_predict, EnsembleState};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

/// A confident ensemble prediction on an unlabeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: u64,
    pub label: usize,
    pub confidence: f64,
    pub iteration: usize,
}

/// Labels every unlabeled example whose ensemble confidence strictly
/// exceeds `threshold`. Each example is seen through a single weak
/// augmentation draw; members run without dropout.
pub fn pseudo_label(
    ensemble: &EnsembleState,
    unlabeled: &[UnlabeledExample],
    threshold: f64,
    weak: &AugmentationPolicy,
    seed: u64,
    iteration: usize,
    mode: ExecMode,
) -> Result<Vec<PseudoLabelRecord>> {
    if unlabeled.is_empty() {
        return Ok(Vec::new());
    }
    let views: Vec<Example> = exec::map(mode, unlabeled, |_, u| {
        let mut rng = streams::weak_augment(seed, iteration, u.id());
        weak_augment(u.example(), weak, &mut rng)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mean = ensemble_logits_chunked(ensemble, &views, mode)?;
    let pred = ensemble_predict(&mean)?;
    Ok(unlabeled
        .iter()
        .zip(pred.classes.iter().zip(&pred.confidences))
        .filter(|(_, (_, &conf))| conf > threshold)
        .map(|(u, (&label, &confidence))| PseudoLabelRecord {
            id: u.id(),
            label,
            confidence,
            iteration,
        })
        .collect())
}

/// Moves the recorded examples from the unlabeled to the labeled pool,
/// tagging each with its pseudo-label and iteration.
pub fn expand_dataset(pools: DatasetPools, records: &[PseudoLabelRecord]) -> Result<DatasetPools> {
    if records.is_empty() {
        return Ok(pools);
    }
    let mut admitted: HashMap<u64, &PseudoLabelRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if admitted.insert(r.id, r).is_some() {
            return Err(Error::InvalidState(format!("example {} pseudo-labeled twice", r.id)));
        }
    }
    let (num_classes, mut labeled, mut provenance, unlabeled) = pools.into_parts();
    let mut remaining = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        match admitted.remove(&u.id()) {
            Some(r) => {
                if r.label >= num_classes {
                    return Err(Error::InvalidState(format!("pseudo-label {} out of range", r.label)));
                }
                let (mut example, _audit) = u.into_parts();
                example.label = Some(r.label);
                labeled.push(example);
                provenance.push(Provenance::PseudoLabel { iteration: r.iteration });
            }
            None => remaining.push(u),
        }
    }
    if let Some(id) = admitted.keys().min() {
        return Err(Error::InvalidState(format!(
            "pseudo-label for unknown unlabeled id {id}"
        )));
    }
    DatasetPools::with_provenance(num_classes, labeled, provenance, remaining)
}
