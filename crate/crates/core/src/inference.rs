//! Predictive mean, uncertainty decomposition, mixture CDF and quantiles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MixtureOutput;

/// Quantile levels exported with every forecast.
pub const EXPORT_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const CDF_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 60;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("mixture variance {0} is negative beyond rounding; component moments are inconsistent")]
    NegativeMixture(f64),
    #[error("quantile level {0} must lie strictly between 0 and 1")]
    Level(f64),
    #[error("interval levels must satisfy 0 < lo < hi < 1, got ({0}, {1})")]
    Interval(f64, f64),
    #[error("no bracket for quantile {alpha} after {MAX_DOUBLINGS} doublings")]
    NoBracket { alpha: f64 },
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    pub mean: f64,
    pub aleatoric: f64,
    pub mixture_unc: f64,
    pub total: f64,
    /// `(α, value)` in ascending `α`.
    pub quantiles: Vec<(f64, f64)>,
    /// `(α_lo, α_hi, lo, hi)`.
    pub intervals: Vec<(f64, f64, f64, f64)>,
}

fn component_means(out: &MixtureOutput) -> Vec<f64> {
    out.dist_params.iter().map(|p| out.kind.mean(p)).collect()
}

/// `Σ_s w_s E[y | s]`.
pub fn predictive_mean(out: &MixtureOutput) -> f64 {
    out.weights.iter().zip(component_means(out)).map(|(w, m)| w * m).sum()
}

/// `(aleatoric, mixture, total)`: `Σ w_s Var_s`, `Σ w_s m_s² − (Σ w_s m_s)²`
/// and their sum.
pub fn predictive_uncertainty(out: &MixtureOutput) -> Result<(f64, f64, f64)> {
    let means = component_means(out);
    let aleatoric: f64 = out.weights.iter().zip(&out.dist_params).map(|(w, p)| w * out.kind.variance(p)).sum();
    let second: f64 = out.weights.iter().zip(&means).map(|(w, m)| w * m * m).sum();
    let first: f64 = out.weights.iter().zip(&means).map(|(w, m)| w * m).sum();
    let mut mixture = second - first * first;
    if mixture < 0.0 {
        // cancellation error grows with the second moment
        if mixture >= -1e-12 * second.max(1.0) {
            mixture = 0.0;
        } else {
            return Err(InferenceError::NegativeMixture(mixture));
        }
    }
    Ok((aleatoric, mixture, aleatoric + mixture))
}

/// `Σ_s w_s F_s(y)`.
pub fn mixture_cdf(out: &MixtureOutput, y: f64) -> f64 {
    let c: f64 = out.weights.iter().zip(&out.dist_params).map(|(w, p)| w * out.kind.cdf(p, y)).sum();
    c.clamp(0.0, 1.0)
}

/// Root of `F(y) − α` by bracketing around the mean, then bisection.
pub fn quantile(out: &MixtureOutput, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::Level(alpha));
    }
    let center = predictive_mean(out);
    let (_, _, total) = predictive_uncertainty(out)?;
    let mut half = 10.0 * total.sqrt();
    if !(half > 0.0) || !half.is_finite() {
        half = 1.0;
    }
    let (mut lo, mut hi) = (center - half, center + half);
    let mut doublings = 0;
    while mixture_cdf(out, lo) > alpha || mixture_cdf(out, hi) < alpha {
        if doublings == MAX_DOUBLINGS {
            return Err(InferenceError::NoBracket { alpha });
        }
        half *= 2.0;
        if mixture_cdf(out, lo) > alpha {
            lo = center - half;
        }
        if mixture_cdf(out, hi) < alpha {
            hi = center + half;
        }
        doublings += 1;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTIONS {
        mid = 0.5 * (lo + hi);
        let f = mixture_cdf(out, mid) - alpha;
        if f.abs() <= CDF_TOL || mid <= lo || mid >= hi {
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

pub fn interval(out: &MixtureOutput, alpha_lo: f64, alpha_hi: f64) -> Result<(f64, f64)> {
    if !(0.0 < alpha_lo && alpha_lo < alpha_hi && alpha_hi < 1.0) {
        return Err(InferenceError::Interval(alpha_lo, alpha_hi));
    }
    Ok((quantile(out, alpha_lo)?, quantile(out, alpha_hi)?))
}

pub fn forecast(out: &MixtureOutput, levels: &[f64], intervals: &[(f64, f64)]) -> Result<ForecastResult> {
    let (aleatoric, mixture_unc, total) = predictive_uncertainty(out)?;
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut quantiles = Vec::with_capacity(sorted.len());
    for a in sorted {
        quantiles.push((a, quantile(out, a)?));
    }
    let mut ivs = Vec::with_capacity(intervals.len());
    for &(a, b) in intervals {
        let (lo, hi) = interval(out, a, b)?;
        ivs.push((a, b, lo, hi));
    }
    Ok(ForecastResult { mean: predictive_mean(out), aleatoric, mixture_unc, total, quantiles, intervals: ivs })
}

/// Draws one value from the mixture.
pub fn sample_mixture<R: Rng + ?Sized>(out: &MixtureOutput, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = out.weights.len() - 1;
    for (i, w) in out.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    out.kind.sample(&out.dist_params[k], rng)
}

/// One line of the prediction export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub timestamp: i64,
    pub mean: f64,
    pub aleatoric: f64,
    pub mixture: f64,
    pub total: f64,
    pub q10: f64,
    pub q30: f64,
    pub q50: f64,
    pub q70: f64,
    pub q90: f64,
    pub weights: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_output(timestamp: i64, out: &MixtureOutput) -> Result<Self> {
        let f = forecast(out, &EXPORT_LEVELS, &[])?;
        let q = |i: usize| f.quantiles[i].1;
        Ok(Self {
            timestamp,
            mean: f.mean,
            aleatoric: f.aleatoric,
            mixture: f.mixture_unc,
            total: f.total,
            q10: q(0),
            q30: q(1),
            q50: q(2),
            q70: q(3),
            q90: q(4),
            weights: out.weights.clone(),
        })
    }
}
