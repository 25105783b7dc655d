use crate::error::{Error, Result};

fn check(logits: &[f64], temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    Ok(())
}

/// `exp(z/T) / Σ exp(z/T)` computed with max shifting.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check(logits, temperature)?;
    let mut out = vec![0.0; logits.len()];
    softmax_row_into(logits, temperature, &mut out);
    Ok(out)
}

/// Log of [`tempered_softmax`] via log-sum-exp.
pub fn log_tempered_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check(logits, temperature)?;
    let mut out = vec![0.0; logits.len()];
    log_softmax_row_into(logits, temperature, &mut out);
    Ok(out)
}

/// Unchecked row kernel; callers validate inputs.
pub fn softmax_row_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Unchecked row kernel; callers validate inputs.
pub fn log_softmax_row_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max) / temperature - lse;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_logits_give_uniform() {
        for t in [0.5, 1.0, 7.0] {
            let p = tempered_softmax(&[3.3, 3.3, 3.3], t).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_class_temperature_two() {
        // exp(1) / (exp(1) + 1)
        let expected = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        let p = tempered_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn log_softmax_cases() {
        let l = log_tempered_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!((l[0] + 2f64.ln()).abs() < 1e-15 && (l[1] + 2f64.ln()).abs() < 1e-15);
        let l = log_tempered_softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
        assert_eq!(l[0], 0.0);
        assert_eq!(l[1], -1000.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(
            tempered_softmax(&[1.0, 2.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            tempered_softmax(&[1.0, 2.0], -1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            tempered_softmax(&[1.0, f64::INFINITY], 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(log_tempered_softmax(&[f64::NAN, 0.0], 1.0).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    fn logits_and_temp() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (
            prop::collection::vec(-50.0f64..50.0, 2..12),
            prop::sample::select(vec![0.5, 1.0, 2.0, 5.0]),
        )
    }

    proptest! {
        #[test]
        fn sums_to_one((z, t) in logits_and_temp()) {
            let p = tempered_softmax(&z, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn shift_invariant((z, t) in logits_and_temp(), k in -100.0f64..100.0) {
            let p = tempered_softmax(&z, t).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + k).collect();
            let q = tempered_softmax(&shifted, t).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_log_matches((z, t) in logits_and_temp()) {
            let p = tempered_softmax(&z, t).unwrap();
            let l = log_tempered_softmax(&z, t).unwrap();
            for (a, b) in p.iter().zip(&l) {
                prop_assert!((a - b.exp()).abs() <= 1e-12);
            }
        }

        #[test]
        fn huge_temperature_is_near_uniform(z in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = tempered_softmax(&z, 1e6).unwrap();
            let u = 1.0 / z.len() as f64;
            for v in p {
                prop_assert!((v - u).abs() < 1e-4);
            }
        }

        #[test]
        fn argmax_preserved((z, t) in logits_and_temp(), t2 in 0.01f64..100.0) {
            let p = tempered_softmax(&z, t).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&z));
            let q = tempered_softmax(&z, t2).unwrap();
            prop_assert_eq!(argmax(&q), argmax(&z));
        }
    }
}
