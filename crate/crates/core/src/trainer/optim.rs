use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `η · cos(7πm / 18M)` for epoch `m` of `M` (counted from 0).
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::InvalidParameter("epoch count must be ≥ 1".into()));
    }
    if epoch > epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} beyond schedule of {epochs}"
        )));
    }
    let angle = 7.0 * std::f64::consts::PI * epoch as f64 / (18.0 * epochs as f64);
    Ok(base * angle.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must be in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update. Parameters are untouched when the
/// gradient contains a non-finite value.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            message: format!("non-finite gradient at parameter {i} (step {})", state.step + 1),
            checkpoint: None,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + hyper.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(cosine_lr(1e-3, 0, 40).unwrap(), 1e-3);
        let end = cosine_lr(1.0, 40, 40).unwrap();
        assert!((end - (7.0 * std::f64::consts::PI / 18.0).cos()).abs() < 1e-12);
        assert!((end - 0.342).abs() < 1e-3);
        assert!((cosine_lr(1.0, 20, 40).unwrap() - 0.819).abs() < 1e-3);
        assert!(cosine_lr(1.0, 41, 40).is_err());
        assert!(cosine_lr(1.0, 0, 0).is_err());
        let lrs: Vec<f64> = (0..=40).map(|m| cosine_lr(1.0, m, 40).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn constant_gradient_moves_about_lr_per_step() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let g = [2.0, -0.5, 1e-3];
        for _ in 0..2000 {
            let before = p.clone();
            adam_step(&mut p, &g, &mut s, 0.01, &AdamHyper::default()).unwrap();
            for ((a, b), gi) in p.iter().zip(&before).zip(&g) {
                let step = b - a;
                assert!(step.signum() == gi.signum());
                assert!((step.abs() - 0.01).abs() < 1e-4, "{step}");
            }
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let h = AdamHyper::default();
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.3], &mut s, 0.1, &h).unwrap();
        // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
        assert!((p[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[0.0, f64::NAN], &mut s, 0.1, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step(), 0);
        assert!(adam_step(&mut p, &[0.0], &mut s, 0.1, &AdamHyper::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut s = AdamState::new(3);
            for i in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x * (i as f64).sin()).collect();
                adam_step(&mut p, &g, &mut s, 0.05, &AdamHyper::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
