//! Training losses and their gradients with respect to logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{log_softmax_row_into, softmax_row_into, Matrix};

/// Normalized inverse-frequency class weights (sum to one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_c = (1/n_c) / Σ_i (1/n_i)`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.len() < 2 {
        return Err(Error::Config("class weights need at least 2 classes".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no labeled examples")));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(ClassWeights(inv.into_iter().map(|v| v / total).collect()))
}

/// Softened ensemble probabilities used as distillation targets.
///
/// Holds plain values only: the loss functions read it but never
/// differentiate through it, so no gradient can reach whatever produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetBatch {
    probabilities: Matrix,
    temperature: f64,
}

impl SoftTargetBatch {
    /// Wraps externally computed probabilities; rows must sum to 1 ± 1e-9.
    pub fn from_probabilities(probabilities: Matrix, temperature: f64) -> Result<Self> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        for (i, row) in probabilities.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidInput(format!("target row {i} is not a distribution")));
            }
        }
        Ok(Self {
            probabilities,
            temperature,
        })
    }

    pub(crate) fn new_unchecked(probabilities: Matrix, temperature: f64) -> Self {
        Self {
            probabilities,
            temperature,
        }
    }

    pub fn probabilities(&self) -> &Matrix {
        &self.probabilities
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// A loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub dlogits: Matrix,
}

fn check_finite(logits: &Matrix) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if logits.cols() < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    Ok(())
}

/// `-(1/N) Σ_i w_{y_i} log p(y_i | x_i)`; gradient row
/// `(w_{y_i}/N) (p_i - onehot(y_i))`.
pub fn weighted_ce(logits: &Matrix, labels: &[usize], weights: &ClassWeights) -> Result<LossGrad> {
    check_finite(logits)?;
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::InvalidInput(format!(
            "{c} classes but {} weights",
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let w = weights.as_slice();
    let mut loss = 0.0;
    let mut d = Matrix::zeros(n, c);
    let mut logp = vec![0.0; c];
    for (i, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        log_softmax_row_into(row, 1.0, &mut logp);
        loss -= w[y] * logp[y];
        let scale = w[y] * inv_n;
        for (j, (g, lp)) in d.row_mut(i).iter_mut().zip(&logp).enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *g = scale * (lp.exp() - onehot);
        }
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        dlogits: d,
    })
}

/// `-(T²/N) Σ_i Σ_c p̄_c log p_s(c)`; gradient row `(T/N)(p_s - p̄)`.
pub fn kd_loss(student_logits: &Matrix, targets: &SoftTargetBatch, temperature: f64) -> Result<LossGrad> {
    check_finite(student_logits)?;
    if temperature != targets.temperature {
        return Err(Error::InvalidState(format!(
            "targets built at T={} used with T={temperature}",
            targets.temperature
        )));
    }
    if student_logits.shape() != targets.probabilities.shape() {
        return Err(Error::InvalidInput(format!(
            "student {:?} vs targets {:?}",
            student_logits.shape(),
            targets.probabilities.shape()
        )));
    }
    let (n, c) = student_logits.shape();
    let t = temperature;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(n, c);
    let mut logp = vec![0.0; c];
    let mut p = vec![0.0; c];
    for (i, (row, target)) in student_logits
        .iter_rows()
        .zip(targets.probabilities.iter_rows())
        .enumerate()
    {
        log_softmax_row_into(row, t, &mut logp);
        softmax_row_into(row, t, &mut p);
        loss -= target.iter().zip(&logp).map(|(q, l)| q * l).sum::<f64>();
        for ((g, ps), q) in d.row_mut(i).iter_mut().zip(&p).zip(target) {
            *g = t * inv_n * (ps - q);
        }
    }
    Ok(LossGrad {
        loss: t * t * inv_n * loss,
        dlogits: d,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    /// `ce + λ·kd`
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub dlogits: Matrix,
}

/// `L = L_CE + λ L_KD`, at the temperature the targets were built with.
/// With `λ = 0` the value and gradient are exactly those of the weighted CE.
pub fn combined_loss(
    logits: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
    targets: &SoftTargetBatch,
    lambda: f64,
) -> Result<CombinedLoss> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("λ must be ≥ 0, got {lambda}")));
    }
    let ce = weighted_ce(logits, labels, weights)?;
    let kd = kd_loss(logits, targets, targets.temperature)?;
    if lambda == 0.0 {
        return Ok(CombinedLoss {
            total: ce.loss,
            ce: ce.loss,
            kd: kd.loss,
            dlogits: ce.dlogits,
        });
    }
    let mut d = ce.dlogits;
    for (g, k) in d.values_mut().iter_mut().zip(kd.dlogits.values()) {
        *g += lambda * k;
    }
    Ok(CombinedLoss {
        total: ce.loss + lambda * kd.loss,
        ce: ce.loss,
        kd: kd.loss,
        dlogits: d,
    })
}
