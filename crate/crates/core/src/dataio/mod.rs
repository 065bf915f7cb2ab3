//! Market-data featurization, seasonal adjustment, synthetic generation,
//! windowing and on-disk dataset bundles.

mod bundle;
mod lob;
mod seasonal;
mod synth;
mod trades;
mod window;

use std::path::PathBuf;

use thiserror::Error;

use crate::grad::Tensor;

pub use bundle::{read_bundle, read_ground_truth, write_bundle, write_ground_truth, BundleMeta, BUNDLE_VERSION};
pub use lob::{featurize_lob, lob_feature_names, read_lob_csv, snapshot_features, LobConfig, LobSnapshot, DEFAULT_DEPTH_FRACTIONS};
pub use seasonal::{deseasonalize, SeasonalProfile, SECONDS_PER_DAY};
pub use synth::{argmax, bayes_regime_filter, synth_generate, SynthConfig, SynthGroundTruth};
pub use trades::{featurize_trades, make_target, read_trades_csv, trade_feature_names, RawTrade, Side};
pub use window::{fit_standardization, window_and_split, Standardization, WindowSpec, WindowedInstance, WindowedSplits};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{what} are not time-sorted at index {index}")]
    Unsorted { what: &'static str, index: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("target at row {row} is {value}; log-normal targets must be > 0")]
    NonPositiveTarget { row: usize, value: f64 },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A regular time grid `start + k·interval`, `k = 0..len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntervalGrid {
    pub start: i64,
    pub interval_seconds: i64,
    pub len: usize,
}

impl IntervalGrid {
    /// Smallest interval-aligned grid covering `[first, last]`.
    pub fn covering(first: f64, last: f64, interval_seconds: i64) -> Result<Self> {
        if interval_seconds <= 0 {
            return Err(DataError::Invalid(format!("interval must be positive, got {}", interval_seconds)));
        }
        if !(first.is_finite() && last.is_finite()) || last < first {
            return Err(DataError::Invalid(format!("bad time range [{}, {}]", first, last)));
        }
        let start = (first.floor() as i64).div_euclid(interval_seconds) * interval_seconds;
        let end = (last.floor() as i64).div_euclid(interval_seconds) * interval_seconds;
        let len = ((end - start) / interval_seconds + 1) as usize;
        Ok(Self { start, interval_seconds, len })
    }

    /// Interval index containing `t`, if on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t.floor() as i64 - self.start).div_euclid(self.interval_seconds);
        (k >= 0 && (k as usize) < self.len).then_some(k as usize)
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.len as i64).map(|k| self.start + k * self.interval_seconds).collect()
    }
}

/// One feature stream on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSeries {
    pub source_id: String,
    pub market_id: String,
    pub feature_names: Vec<String>,
    /// Interval start times, epoch seconds.
    pub timestamps: Vec<i64>,
    /// T × d_s.
    pub values: Tensor,
    pub interval_seconds: i64,
}

impl SourceSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Keeps rows `from..`.
    pub fn drop_leading(&self, from: usize) -> SourceSeries {
        let d = self.dim();
        SourceSeries {
            timestamps: self.timestamps[from..].to_vec(),
            values: Tensor::new(self.len() - from, d, self.values.data()[from * d..].to_vec()).expect("row slice"),
            ..self.clone()
        }
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.values.get(r, c)).collect()
    }
}

/// Contiguous, time-ordered split fractions.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) || self.train <= 0.0 {
            return Err(DataError::Invalid(format!("bad split fractions {:?}", parts)));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!("split fractions sum to {}, expected 1", parts.iter().sum::<f64>())));
        }
        Ok(())
    }

    /// Row boundaries `(train_end, val_end)` for `t` rows.
    pub fn boundaries(&self, t: usize) -> (usize, usize) {
        let train_end = (self.train * t as f64).round() as usize;
        let val_end = ((self.train + self.val) * t as f64).round() as usize;
        (train_end.min(t), val_end.min(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{}' (expected train|val|test)", other)),
        }
    }
}

/// S aligned sources plus the target series.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceDataset {
    pub sources: Vec<SourceSeries>,
    pub timestamps: Vec<i64>,
    pub interval_seconds: i64,
    pub target: Vec<f64>,
    pub seasonal_profile: Option<SeasonalProfile>,
    pub splits: SplitFractions,
}

impl MultiSourceDataset {
    /// Aligns sources that share a grid but may start late (dropped leading
    /// gaps) by trimming everyone to the latest common start.
    pub fn align(sources: Vec<SourceSeries>, target: (Vec<i64>, Vec<f64>), splits: SplitFractions) -> Result<Self> {
        let (target_ts, target) = target;
        if sources.is_empty() {
            return Err(DataError::Invalid("dataset needs at least one source".into()));
        }
        if target_ts.len() != target.len() {
            return Err(DataError::Invalid("target timestamps and values differ in length".into()));
        }
        let interval = sources[0].interval_seconds;
        let end = target_ts.last().copied();
        let start = sources.iter().filter_map(|s| s.timestamps.first().copied()).chain(target_ts.first().copied()).max();
        let (Some(start), Some(end)) = (start, end) else {
            return Err(DataError::Invalid("empty series".into()));
        };
        let trim = |ts: &[i64]| -> Result<usize> {
            let k = ts.iter().position(|&t| t == start).ok_or_else(|| DataError::Invalid("sources are not on a shared grid".into()))?;
            if ts.last() != Some(&end) {
                return Err(DataError::Invalid("sources end at different times".into()));
            }
            Ok(k)
        };
        let mut aligned = Vec::with_capacity(sources.len());
        for s in &sources {
            if s.interval_seconds != interval {
                return Err(DataError::Invalid(format!("source {} has interval {}, expected {}", s.source_id, s.interval_seconds, interval)));
            }
            aligned.push(s.drop_leading(trim(&s.timestamps)?));
        }
        let k = trim(&target_ts)?;
        let ds = Self {
            timestamps: target_ts[k..].to_vec(),
            interval_seconds: interval,
            target: target[k..].to_vec(),
            sources: aligned,
            seasonal_profile: None,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.dim()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        if self.target.len() != self.len() {
            return Err(DataError::Invalid("target length differs from timestamps".into()));
        }
        for s in &self.sources {
            if s.timestamps != self.timestamps {
                return Err(DataError::Invalid(format!("source {} is not aligned with the target", s.source_id)));
            }
            if !s.values.all_finite() {
                return Err(DataError::Invalid(format!("source {} has non-finite values", s.source_id)));
            }
        }
        if let Some(row) = self.target.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("target at row {} is not finite", row)));
        }
        Ok(())
    }

    /// Row boundaries `(train_end, val_end)`.
    pub fn split_rows(&self) -> (usize, usize) {
        self.splits.boundaries(self.len())
    }

    /// Applies intraday deseasonalization to the target, fitted on the
    /// training rows.
    pub fn deseasonalize_target(&mut self, slots_per_day: usize) -> Result<()> {
        let (train_end, _) = self.split_rows();
        let (residual, profile) = deseasonalize(&self.target, &self.timestamps, slots_per_day, 0..train_end)?;
        self.target = residual;
        self.seasonal_profile = Some(profile);
        Ok(())
    }
}

/// Raw inputs of one market.
#[derive(Clone, Debug)]
pub struct MarketInput {
    pub market_id: String,
    pub trades: Vec<RawTrade>,
    pub snapshots: Vec<LobSnapshot>,
}

/// Builds the multi-market dataset: per market a transaction source
/// (`<market>_trades`, 6 features) then an order-book source
/// (`<market>_lob`), on one shared grid. The target is the traded volume of
/// `target_market`.
pub fn featurize_markets(
    markets: &[MarketInput],
    interval_seconds: i64,
    lob: &LobConfig,
    target_market: usize,
    splits: SplitFractions,
) -> Result<MultiSourceDataset> {
    if target_market >= markets.len() {
        return Err(DataError::Invalid(format!("target market {} out of range ({} markets)", target_market, markets.len())));
    }
    let times = markets.iter().flat_map(|m| m.trades.iter().map(|t| t.timestamp).chain(m.snapshots.iter().map(|s| s.timestamp)));
    let (first, last) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let grid = IntervalGrid::covering(first, last, interval_seconds)?;
    let mut sources = Vec::with_capacity(2 * markets.len());
    let mut target = Vec::new();
    for (k, m) in markets.iter().enumerate() {
        let tr = featurize_trades(&m.trades, &grid, &format!("{}_trades", m.market_id), &m.market_id)?;
        if k == target_market {
            target = make_target(&tr);
        }
        sources.push(tr);
        sources.push(featurize_lob(&m.snapshots, &grid, lob, &format!("{}_lob", m.market_id), &m.market_id)?);
    }
    MultiSourceDataset::align(sources, (grid.timestamps(), target), splits)
}
