//! Least-squares power laws on log-log axes.

/// `value ~ exp(intercept) * abscissa^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("power-law fit needs at least 4 samples, got {0}")]
    TooFew(usize),
    #[error("power-law fit needs positive finite samples, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("power-law fit needs at least two distinct abscissae")]
    Degenerate,
}

impl DecayFit {
    /// Fitted value at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        (self.intercept + self.exponent * x.ln()).exp()
    }
}

pub fn fit_power_law(samples: &[(f64, f64)]) -> Result<DecayFit, FitError> {
    if samples.len() < 4 {
        return Err(FitError::TooFew(samples.len()));
    }
    if let Some(&(x, y)) = samples.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(FitError::NonPositive(x, y));
    }
    let n = samples.len() as f64;
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(FitError::Degenerate);
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - exponent * x).powi(2)).sum();
    // a perfect fit (including constant data) has nothing left to explain
    let r_squared = if syy <= 1e-300 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(DecayFit { exponent, intercept, r_squared, n_points: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_input() {
        assert_eq!(fit_power_law(&[(1.0, 1.0); 3]), Err(FitError::TooFew(3)));
        assert!(matches!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)]), Err(FitError::NonPositive(..))));
        assert_eq!(fit_power_law(&[(2.0, 1.0); 4]), Err(FitError::Degenerate));
    }
}
