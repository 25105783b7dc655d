use crate::error::{Error, Result};

/// Central-difference gradient estimate `(f(x+h e_j) - f(x-h e_j)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let plus = f(&probe);
        probe[j] = orig - h;
        let minus = f(&probe);
        probe[j] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_and_linear() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| x[0], &[1.0], -1e-3).is_err());
    }
}
