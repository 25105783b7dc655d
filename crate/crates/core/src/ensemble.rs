//! Ensemble members and the shared prediction machinery: averaged logits,
//! softened targets for distillation and the unsmoothed ensemble
//! prediction used for pseudo-labeling.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::losses::SoftTargetBatch;
use crate::model::{ClassifierModel, ModelSpec};
use crate::numkernel::{argmax, softmax_row_into, Matrix, RngStream};

const MEMBER_STREAM: u64 = 0x3e3b;

/// Initialization seed of member `k` for a run seeded with `seed`. Member
/// 0 of every ensemble shares its initialization with a single model
/// trained under the same seed.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    RngStream::new(seed, MEMBER_STREAM).derive(&[k as u64]).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    members: Vec<ClassifierModel>,
    seeds: Vec<u64>,
}

impl EnsembleState {
    /// `k` members with the same architecture and distinct initializations.
    pub fn new(spec: &ModelSpec, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble size must be ≥ 1".into()));
        }
        let seeds: Vec<u64> = (0..k).map(|i| member_seed(seed, i)).collect();
        let members = seeds
            .iter()
            .map(|&s| ClassifierModel::init(spec.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members, seeds })
    }

    pub fn from_members(members: Vec<ClassifierModel>, seeds: Vec<u64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("ensemble size must be ≥ 1".into()))?;
        if members
            .iter()
            .any(|m| m.input_dim() != first.input_dim() || m.num_classes() != first.num_classes())
        {
            return Err(Error::InvalidInput(
                "members disagree on input/output dimensions".into(),
            ));
        }
        if seeds.len() != members.len() {
            return Err(Error::InvalidInput("one seed per member required".into()));
        }
        Ok(Self { members, seeds })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[ClassifierModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [ClassifierModel] {
        &mut self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Eval-mode logits of every member on `batch`.
    pub fn member_logits(&self, batch: &Matrix, mode: crate::ExecMode) -> Result<Vec<Matrix>> {
        crate::exec::map(mode, &self.members, |_, m| m.logits(batch))
            .into_iter()
            .collect()
    }
}

/// Elementwise mean `(1/K) Σ_k z^k`.
pub fn ensemble_logits(member_logits: &[Matrix]) -> Result<Matrix> {
    let first = member_logits
        .first()
        .ok_or_else(|| Error::InvalidInput("no member logits".into()))?;
    let shape = first.shape();
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for z in member_logits {
        if z.shape() != shape {
            return Err(Error::InvalidInput(format!(
                "member logits {:?} vs {:?}",
                z.shape(),
                shape
            )));
        }
        for (s, v) in sum.values_mut().iter_mut().zip(z.values()) {
            *s += v;
        }
    }
    let k = member_logits.len() as f64;
    sum.values_mut().iter_mut().for_each(|v| *v /= k);
    Ok(sum)
}

/// Row-wise tempered softmax of the mean logits, frozen as targets.
pub fn soft_targets(mean_logits: &Matrix, temperature: f64) -> Result<SoftTargetBatch> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !mean_logits.is_finite() {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let mut probs = Matrix::zeros(mean_logits.rows(), mean_logits.cols());
    for i in 0..mean_logits.rows() {
        softmax_row_into(mean_logits.row(i), temperature, probs.row_mut(i));
    }
    Ok(SoftTargetBatch::new_unchecked(probs, temperature))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub probabilities: Matrix,
    pub classes: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Softmax at `T = 1`, argmax with lowest-index tie-break, and the
/// maximum probability as confidence.
pub fn ensemble_predict(mean_logits: &Matrix) -> Result<EnsemblePrediction> {
    if !mean_logits.is_finite() {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let mut probabilities = Matrix::zeros(mean_logits.rows(), mean_logits.cols());
    let mut classes = Vec::with_capacity(mean_logits.rows());
    let mut confidences = Vec::with_capacity(mean_logits.rows());
    for i in 0..mean_logits.rows() {
        let row = probabilities.row_mut(i);
        softmax_row_into(mean_logits.row(i), 1.0, row);
        let c = argmax(row);
        classes.push(c);
        confidences.push(row[c]);
    }
    Ok(EnsemblePrediction {
        probabilities,
        classes,
        confidences,
    })
}
