use crate::error::{Error, Result};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Mean and 95% confidence half-width of accuracy fractions, both in
/// percent: `(100 * mean, 100 * 1.96 * s / sqrt(n))` with the sample
/// standard deviation `s`.
pub fn mean_ci95(accuracies: &[f64]) -> Result<(f64, f64)> {
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = accuracies.iter().sum::<f64>() / nf;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok((100.0 * mean, 100.0 * Z95 * var.sqrt() / nf.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_have_zero_width() {
        assert_eq!(mean_ci95(&[0.5; 10]).unwrap(), (50.0, 0.0));
    }

    #[test]
    fn two_point_case() {
        // s = sqrt(0.5); 1.96 * s / sqrt(2) = 0.98
        let (m, ci) = mean_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 50.0);
        assert!((ci - 98.0).abs() < 1e-12, "{ci}");
    }

    #[test]
    fn quadrupling_the_sample_halves_the_width() {
        let base = [0.2, 0.4, 0.4, 0.8, 0.6];
        let big: Vec<f64> = base.iter().cycle().take(20).copied().collect();
        let (m1, c1) = mean_ci95(&base).unwrap();
        let (m4, c4) = mean_ci95(&big).unwrap();
        assert!((m1 - m4).abs() < 1e-12);
        // with the n-1 divisor the exact ratio is sqrt(4/19), 1/2 only as n grows
        let expected = c1 * (4.0f64 / 19.0).sqrt();
        assert!((c4 - expected).abs() < 1e-12, "{c4} vs {expected}");
        assert!((c4 / c1 - 0.5).abs() < 0.05);
    }

    #[test]
    fn too_few_values() {
        assert!(mean_ci95(&[0.3]).is_err());
        assert!(mean_ci95(&[]).is_err());
    }
}
