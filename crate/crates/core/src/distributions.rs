//! Density, CDF and moments for the per-source predictive distributions.
//!
//! `Normal` models `y ~ N(mu, sigma2)`; `LogNormal` models
//! `ln y ~ N(mu, sigma2)` on `y > 0`.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("log-normal density is undefined at y = {0} (targets must be > 0)")]
    NonPositiveTarget(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Normal,
    LogNormal,
}

impl std::str::FromStr for DistKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(DistKind::Normal),
            "lognormal" | "log-normal" | "log_normal" => Ok(DistKind::LogNormal),
            other => Err(format!("unknown distribution '{}' (expected normal|lognormal)", other)),
        }
    }
}

impl std::fmt::Display for DistKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistKind::Normal => "normal",
            DistKind::LogNormal => "lognormal",
        })
    }
}

/// Location `mu` (of `y`, or of `ln y`) and variance parameter `sigma2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl DistParams {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self { mu, sigma2 }
    }
}

/// `-½ ln(2π)`
pub const LOG_NORM_CONST: f64 = -0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// One standard normal draw by Box–Muller (cosine branch) from two uniforms.
pub fn std_normal_sample<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps the log finite
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl DistKind {
    pub fn log_pdf(self, p: &DistParams, y: f64) -> Result<f64, DistError> {
        match self {
            DistKind::Normal => Ok(normal_log_pdf(p.mu, p.sigma2, y)),
            DistKind::LogNormal => {
                if y <= 0.0 {
                    return Err(DistError::NonPositiveTarget(y));
                }
                let ly = y.ln();
                Ok(normal_log_pdf(p.mu, p.sigma2, ly) - ly)
            }
        }
    }

    pub fn mean(self, p: &DistParams) -> f64 {
        match self {
            DistKind::Normal => p.mu,
            DistKind::LogNormal => (p.mu + 0.5 * p.sigma2).exp(),
        }
    }

    pub fn variance(self, p: &DistParams) -> f64 {
        match self {
            DistKind::Normal => p.sigma2,
            DistKind::LogNormal => p.sigma2.exp_m1() * (2.0 * p.mu + p.sigma2).exp(),
        }
    }

    pub fn cdf(self, p: &DistParams, y: f64) -> f64 {
        let sd = p.sigma2.sqrt();
        match self {
            DistKind::Normal => std_normal_cdf((y - p.mu) / sd),
            DistKind::LogNormal => {
                if y <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf((y.ln() - p.mu) / sd)
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, p: &DistParams, rng: &mut R) -> f64 {
        let x = p.mu + p.sigma2.sqrt() * std_normal_sample(rng);
        match self {
            DistKind::Normal => x,
            DistKind::LogNormal => x.exp(),
        }
    }

    /// Whether `y` lies in the support.
    pub fn supports(self, y: f64) -> bool {
        match self {
            DistKind::Normal => y.is_finite(),
            DistKind::LogNormal => y.is_finite() && y > 0.0,
        }
    }
}

fn normal_log_pdf(mu: f64, sigma2: f64, y: f64) -> f64 {
    let d = y - mu;
    LOG_NORM_CONST - 0.5 * sigma2.ln() - 0.5 * d * d / sigma2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use DistKind::{LogNormal, Normal};

    fn p(mu: f64, sigma2: f64) -> DistParams {
        DistParams::new(mu, sigma2)
    }

    #[test]
    fn log_pdf_examples() {
        let half_ln_2pi = -0.918_938_533_204_672_7;
        assert!((Normal.log_pdf(&p(0.0, 1.0), 0.0).unwrap() - half_ln_2pi).abs() < 1e-15);
        assert!((LogNormal.log_pdf(&p(0.0, 1.0), 1.0).unwrap() - half_ln_2pi).abs() < 1e-15);
        // mpmath: -ln(8π)/2 - 1/2
        assert!((Normal.log_pdf(&p(1.0, 4.0), 3.0).unwrap() - -2.112_085_713_764_618).abs() < 1e-13);
        assert_eq!(LogNormal.log_pdf(&p(0.0, 1.0), 0.0), Err(DistError::NonPositiveTarget(0.0)));
        assert!(LogNormal.log_pdf(&p(0.0, 1.0), -2.0).is_err());
    }

    #[test]
    fn moments_examples() {
        assert_eq!(Normal.mean(&p(2.0, 9.0)), 2.0);
        assert!((LogNormal.mean(&p(0.0, 1.0)) - 1.648_721_270_700_128).abs() < 1e-14);
        assert_eq!(LogNormal.mean(&p(0.0, 0.0)), 1.0);
        assert_eq!(Normal.variance(&p(5.0, 3.0)), 3.0);
        assert!((LogNormal.variance(&p(0.0, 1.0)) - 4.670_774_270_471_605).abs() < 1e-13);
        assert!(LogNormal.variance(&p(0.3, 0.2)) > 0.0);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(Normal.cdf(&p(0.0, 1.0), 0.0), 0.5);
        // mpmath ncdf(1.959964) = 0.975000000903557595...
        assert!((Normal.cdf(&p(0.0, 1.0), 1.959964) - 0.975_000_000_903_557_6).abs() < 1e-14);
        assert!((LogNormal.cdf(&p(0.0, 1.0), 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(LogNormal.cdf(&p(0.0, 1.0), 0.0), 0.0);
        assert_eq!(LogNormal.cdf(&p(0.0, 1.0), -1.0), 0.0);
    }

    #[test]
    fn cdf_limits_and_monotonicity() {
        for kind in [Normal, LogNormal] {
            let q = p(0.4, 0.7);
            assert!(kind.cdf(&q, 1e300) > 1.0 - 1e-12);
            let lo = if kind == Normal { -1e300 } else { 1e-300 };
            assert!(kind.cdf(&q, lo) < 1e-12);
            let mut prev = 0.0;
            for i in 0..2000 {
                let y = -5.0 + i as f64 * 0.01;
                let c = kind.cdf(&q, y);
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = p(rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.5));
            for kind in [Normal, LogNormal] {
                // substitution y = e^x for the log-normal keeps the grid uniform in log space
                let sd = q.sigma2.sqrt();
                let (lo, hi) = (q.mu - 12.0 * sd, q.mu + 12.0 * sd);
                let n = 20_000;
                let h = (hi - lo) / n as f64;
                let mut total = 0.0;
                for i in 0..=n {
                    let x = lo + i as f64 * h;
                    let (y, jac) = match kind {
                        Normal => (x, 1.0),
                        LogNormal => (x.exp(), x.exp()),
                    };
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                    total += w * kind.log_pdf(&q, y).unwrap().exp() * jac;
                }
                total *= h;
                assert!((total - 1.0).abs() < 1e-4, "{:?} {:?} -> {}", kind, q, total);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_and_positive() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16).map(|_| Normal.sample(&p(0.0, 1.0), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..10_000).all(|_| LogNormal.sample(&p(-1.0, 2.0), &mut rng) > 0.0));
    }

    #[test]
    fn standard_normal_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let mean = (0..n).map(|_| std_normal_sample(&mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "{}", mean);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let q = p(rng.gen_range(-0.5..0.5), rng.gen_range(0.05..0.5));
            for kind in [Normal, LogNormal] {
                let n = 1_000_000;
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let y = kind.sample(&q, &mut rng);
                    s += y;
                    s2 += y * y;
                }
                let m = s / n as f64;
                let v = s2 / n as f64 - m * m;
                let (tm, tv) = (kind.mean(&q), kind.variance(&q));
                // Normal means near zero: compare on the scale of the spread
                let scale = tm.abs().max(tv.sqrt());
                assert!((m - tm).abs() / scale < 0.01, "{:?} mean {} vs {}", kind, m, tm);
                assert!((v - tv).abs() / tv < 0.01, "{:?} var {} vs {}", kind, v, tv);
            }
        }
    }
}
