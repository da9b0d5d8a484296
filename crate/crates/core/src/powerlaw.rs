//! Power-law fits in log-log space and comparison with predicted exponents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exponent::Exponent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Exponent of `d`.
    pub slope: f64,
    /// `log2` of the prefactor.
    pub intercept: f64,
    pub stderr_slope: f64,
    pub n_points: usize,
    /// Points discarded because their value was not positive and finite.
    pub n_dropped: usize,
    pub r_squared: f64,
}

impl PowerLawFit {
    /// The fit of the square root of the series: variances scale as `d^(2q)`.
    pub fn halved(&self) -> PowerLawFit {
        PowerLawFit {
            slope: self.slope / 2.0,
            intercept: self.intercept / 2.0,
            stderr_slope: self.stderr_slope / 2.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 3 distinct widths with positive values; {usable} usable after dropping {dropped}")]
    TooFewPoints { usable: usize, dropped: usize },
    #[error("need at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Match,
    Mismatch,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Match => "Match",
            Verdict::Mismatch => "Mismatch",
        })
    }
}

/// Ordinary least squares of `log2(value)` on `log2(d)`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<PowerLawFit, FitError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(d, v)| *d > 0.0 && *v > 0.0 && v.is_finite())
        .map(|&(d, v)| (d.log2(), v.log2()))
        .collect();
    let dropped = points.len() - usable.len();
    let mut widths: Vec<f64> = usable.iter().map(|p| p.0).collect();
    widths.sort_by(f64::total_cmp);
    widths.dedup();
    if widths.len() < 3 {
        return Err(FitError::TooFewPoints { usable: usable.len(), dropped });
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = usable.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = usable.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ssr / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(PowerLawFit {
        slope,
        intercept,
        stderr_slope: (ssr / (n - 2.0) / sxx).sqrt(),
        n_points: usable.len(),
        n_dropped: dropped,
        r_squared,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean_slope: f64,
    pub std_slope: f64,
    pub fits: Vec<PowerLawFit>,
}

/// Fits each seed's series separately and summarizes the slopes.
pub fn aggregate_seeds(series: &[Vec<(f64, f64)>]) -> Result<SeedAggregate, FitError> {
    if series.len() < 2 {
        return Err(FitError::TooFewSeeds(series.len()));
    }
    let fits = series.iter().map(|s| fit_loglog(s)).collect::<Result<Vec<_>, _>>()?;
    let slopes: Vec<f64> = fits.iter().map(|f| f.slope).collect();
    let (mean_slope, std_slope) = mean_std(&slopes);
    Ok(SeedAggregate { mean_slope, std_slope, fits })
}

pub fn compare_to_theory(fit: &PowerLawFit, predicted: Exponent, tol: f64) -> Verdict {
    compare_slope(fit.slope, predicted, tol)
}

pub fn compare_slope(slope: f64, predicted: Exponent, tol: f64) -> Verdict {
    assert!(tol > 0.0, "tolerance must be positive");
    if (slope - predicted.to_f64()).abs() <= tol {
        Verdict::Match
    } else {
        Verdict::Mismatch
    }
}
