//! Point, probabilistic and uncertainty-conditioned evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{self, InferenceError};
use crate::model::MixtureOutput;
use crate::training::{self, TrainError};

/// Levels averaged by [`qlm`].
pub const QL_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric needs at least one instance")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("quantile loss is undefined when every target is zero")]
    ZeroNormalizer,
    #[error("quantile level {0} is missing")]
    MissingLevel(f64),
    #[error("{n} instances cannot fill {bins} bins")]
    TooFewInstances { n: usize, bins: usize },
    #[error("need at least 2 bins, got {0}")]
    Bins(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(MetricError::Length(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean negative log-likelihood of the mixture at the targets.
pub fn nllm(outputs: &[MixtureOutput], y: &[f64]) -> Result<f64> {
    if outputs.len() != y.len() {
        return Err(MetricError::Length(outputs.len(), y.len()));
    }
    Ok(training::mixture_nll(outputs, y)?)
}

/// Normalized pinball loss
/// `Σ 2[α(y−ŷ)⁺ + (1−α)(ŷ−y)⁺] / Σ|y|`.
pub fn quantile_loss(y: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    check(y, q)?;
    let norm: f64 = y.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(MetricError::ZeroNormalizer);
    }
    let loss: f64 = y
        .iter()
        .zip(q)
        .map(|(&yi, &qi)| 2.0 * (alpha * (yi - qi).max(0.0) + (1.0 - alpha) * (qi - yi).max(0.0)))
        .sum();
    Ok(loss / norm)
}

/// Mean of the quantile losses at [`QL_LEVELS`]; `by_level` maps each level
/// to its predictions and may list levels in any order.
pub fn qlm(y: &[f64], by_level: &[(f64, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for level in QL_LEVELS {
        let (_, q) = by_level.iter().find(|(a, _)| (a - level).abs() < 1e-12).ok_or(MetricError::MissingLevel(level))?;
        total += quantile_loss(y, q, level)?;
    }
    Ok(total / QL_LEVELS.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncBin {
    pub index: usize,
    /// Range of uncertainty scores in the bin.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyAnalysis {
    pub bins: Vec<UncBin>,
    /// Rank correlation between bin index and bin RMSE over non-empty bins.
    pub spearman: Option<f64>,
    /// Fewer than two non-empty bins.
    pub degenerate: bool,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Groups instances by empirical quantiles of the uncertainty score and
/// reports the RMSE per group. An instance joins the first bin whose upper
/// edge it does not exceed, so ties go to the lower bin.
pub fn uncertainty_conditioned_errors(y: &[f64], yhat: &[f64], unc: &[f64], n_bins: usize) -> Result<UncertaintyAnalysis> {
    check(y, yhat)?;
    if unc.len() != y.len() {
        return Err(MetricError::Length(y.len(), unc.len()));
    }
    if n_bins < 2 {
        return Err(MetricError::Bins(n_bins));
    }
    let n = y.len();
    if n < n_bins {
        return Err(MetricError::TooFewInstances { n, bins: n_bins });
    }
    let mut sorted = unc.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_bins).map(|k| sorted[(k * n).div_ceil(n_bins) - 1]).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, u) in unc.iter().enumerate() {
        let b = edges.iter().position(|e| u <= e).unwrap_or(n_bins - 1);
        members[b].push(i);
    }
    let bins: Vec<UncBin> = members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            if m.is_empty() {
                // zeros rather than NaN keep the JSON export valid
                return UncBin { index: b, lo: 0.0, hi: 0.0, count: 0, rmse: None };
            }
            let lo = m.iter().map(|&i| unc[i]).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|&i| unc[i]).fold(f64::NEG_INFINITY, f64::max);
            let mse = m.iter().map(|&i| (y[i] - yhat[i]).powi(2)).sum::<f64>() / m.len() as f64;
            UncBin { index: b, lo, hi, count: m.len(), rmse: Some(mse.sqrt()) }
        })
        .collect();
    let filled: Vec<&UncBin> = bins.iter().filter(|b| b.count > 0).collect();
    let degenerate = filled.len() < 2;
    let spearman = if degenerate {
        None
    } else {
        let idx: Vec<f64> = filled.iter().map(|b| b.index as f64).collect();
        let err: Vec<f64> = filled.iter().map(|b| b.rmse.unwrap_or(0.0)).collect();
        spearman(&idx, &err)
    };
    Ok(UncertaintyAnalysis { bins, spearman, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub nllm: f64,
    pub qlm: f64,
    /// Keyed by level, e.g. `"0.1"`.
    pub ql_by_alpha: BTreeMap<String, f64>,
    pub unc_bins: Vec<UncBin>,
    pub spearman: Option<f64>,
    pub degenerate: bool,
}

impl EvalReport {
    /// Flat `metric,value` rows followed by the bin table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("n,{}\nrmse,{}\nmae,{}\nnllm,{}\nqlm,{}\n", self.n, self.rmse, self.mae, self.nllm, self.qlm));
        for (k, v) in &self.ql_by_alpha {
            s.push_str(&format!("ql_{},{}\n", k, v));
        }
        s.push_str(&format!("spearman,{}\n", self.spearman.map_or(String::new(), |v| v.to_string())));
        s.push_str("\nbin,lo,hi,count,rmse\n");
        for b in &self.unc_bins {
            s.push_str(&format!("{},{},{},{},{}\n", b.index, b.lo, b.hi, b.count, b.rmse.map_or(String::new(), |v| v.to_string())));
        }
        s
    }
}

/// Full report for model outputs against targets (same units).
pub fn evaluate(outputs: &[MixtureOutput], y: &[f64], n_bins: usize) -> Result<EvalReport> {
    if outputs.len() != y.len() {
        return Err(MetricError::Length(outputs.len(), y.len()));
    }
    let mut means = Vec::with_capacity(y.len());
    let mut totals = Vec::with_capacity(y.len());
    let mut quantiles: Vec<(f64, Vec<f64>)> = QL_LEVELS.iter().map(|&a| (a, Vec::with_capacity(y.len()))).collect();
    for o in outputs {
        means.push(inference::predictive_mean(o));
        totals.push(inference::predictive_uncertainty(o)?.2);
        for (a, q) in quantiles.iter_mut() {
            q.push(inference::quantile(o, *a)?);
        }
    }
    let mut ql_by_alpha = BTreeMap::new();
    for (a, q) in &quantiles {
        ql_by_alpha.insert(a.to_string(), quantile_loss(y, q, *a)?);
    }
    let unc = uncertainty_conditioned_errors(y, &means, &totals, n_bins)?;
    Ok(EvalReport {
        n: y.len(),
        rmse: rmse(y, &means)?,
        mae: mae(y, &means)?,
        nllm: nllm(outputs, y)?,
        qlm: qlm(y, &quantiles)?,
        ql_by_alpha,
        unc_bins: unc.bins,
        spearman: unc.spearman,
        degenerate: unc.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{DistKind, DistParams};
    use proptest::prelude::*;

    #[test]
    fn point_metric_examples() {
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535_533_905_932_737_8).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(rmse(&[], &[]), Err(MetricError::Empty)));
    }

    #[test]
    fn quantile_loss_examples() {
        assert_eq!(quantile_loss(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 0.5).unwrap(), 0.5);
        assert_eq!(quantile_loss(&[1.0, -2.0], &[1.0, -2.0], 0.9).unwrap(), 0.0);
        assert!(matches!(quantile_loss(&[0.0, 0.0], &[1.0, 1.0], 0.5), Err(MetricError::ZeroNormalizer)));
    }

    #[test]
    fn qlm_examples() {
        let y = [1.0, 2.0];
        let exact: Vec<(f64, Vec<f64>)> = QL_LEVELS.iter().map(|&a| (a, y.to_vec())).collect();
        assert_eq!(qlm(&y, &exact).unwrap(), 0.0);
        let mut rev = exact.clone();
        rev.reverse();
        assert_eq!(qlm(&y, &rev).unwrap(), 0.0);
        assert!(matches!(qlm(&y, &exact[..4]), Err(MetricError::MissingLevel(_))));
        // predictions chosen so QL(α) = 0.1·(k+1)
        let y = [10.0];
        let preds: Vec<(f64, Vec<f64>)> =
            QL_LEVELS.iter().enumerate().map(|(k, &a)| (a, vec![10.0 + 0.1 * (k + 1) as f64 * 10.0 / (2.0 * (1.0 - a))])).collect();
        for (k, (a, q)) in preds.iter().enumerate() {
            assert!((quantile_loss(&y, q, *a).unwrap() - 0.1 * (k + 1) as f64).abs() < 1e-12);
        }
        assert!((qlm(&y, &preds).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_uncertainty_is_degenerate() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let a = uncertainty_conditioned_errors(&y, &[0.0; 4], &[0.5; 4], 2).unwrap();
        assert!(a.degenerate && a.spearman.is_none());
        assert_eq!(a.bins[0].count, 4);
    }

    #[test]
    fn rank_correlated_uncertainty_is_monotone() {
        let n = 100;
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * i as f64 * 0.1).collect();
        let yhat = vec![0.0; n];
        let unc: Vec<f64> = y.iter().map(|v| v.abs()).collect();
        let a = uncertainty_conditioned_errors(&y, &yhat, &unc, 5).unwrap();
        let r: Vec<f64> = a.bins.iter().map(|b| b.rmse.unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.spearman, Some(1.0));
        assert_eq!(a.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }

    #[test]
    fn nllm_examples() {
        let out = MixtureOutput { kind: DistKind::Normal, weights: vec![1.0], dist_params: vec![DistParams::new(0.0, 1.0)], reps: Vec::new() };
        assert!((nllm(&[out.clone(), out.clone()], &[0.0, 0.0]).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-15);
        let sharp = MixtureOutput { dist_params: vec![DistParams::new(0.0, 0.25)], ..out.clone() };
        let ys = [0.1, -0.2, 0.05];
        assert!(nllm(&vec![sharp; 3], &ys).unwrap() < nllm(&vec![out; 3], &ys).unwrap());
    }

    proptest! {
        #[test]
        fn median_loss_identity(pairs in prop::collection::vec((-50i32..50, -50i32..50), 1..40)) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let q: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assume!(y.iter().any(|v| *v != 0.0));
            let norm: f64 = y.iter().map(|v| v.abs()).sum();
            let abs: f64 = y.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!((quantile_loss(&y, &q, 0.5).unwrap() - abs / norm).abs() <= 1e-12 * (abs / norm).max(1.0));
        }

        #[test]
        fn rmse_dominates_mae_and_is_permutation_invariant(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30)) {
            let y: Vec<f64> = v.iter().map(|p| p.0).collect();
            let h: Vec<f64> = v.iter().map(|p| p.1).collect();
            prop_assert!(rmse(&y, &h).unwrap() + 1e-12 >= mae(&y, &h).unwrap());
            let (ry, rh): (Vec<f64>, Vec<f64>) = v.iter().rev().cloned().unzip();
            prop_assert!((rmse(&y, &h).unwrap() - rmse(&ry, &rh).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pinball_is_convex(y in -5.0f64..5.0, a in 0.05f64..0.95, q1 in -5.0f64..5.0, q2 in -5.0f64..5.0, t in 0.0f64..1.0) {
            let f = |q: f64| quantile_loss(&[y], &[q], a).unwrap_or(0.0);
            prop_assume!(y != 0.0);
            prop_assert!(f(t * q1 + (1.0 - t) * q2) <= t * f(q1) + (1.0 - t) * f(q2) + 1e-12);
        }
    }
}
