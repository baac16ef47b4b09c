use crate::error::{Error, Result};

/// Central-difference gradient estimate `(f(p+h) - f(p-h)) / 2h` per coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Floor on the denominator of [`relative_error`]; below it the comparison
/// is effectively absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_diff(|p| p[0].sin(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff(|p| p[0], &[1.0], 0.0).is_err());
        assert!(finite_diff(|p| p[0], &[1.0], f64::NAN).is_err());
    }

    #[test]
    fn restores_parameters() {
        let mut seen = Vec::new();
        finite_diff(|p| { seen.push(p.to_vec()); p.iter().sum() }, &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(seen.len(), 4);
        assert_eq!(seen[2], vec![1.0, 2.5]);
    }
}
