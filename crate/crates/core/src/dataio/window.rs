use serde::{Deserialize, Serialize};

use super::{DataError, MultiSourceDataset, Result, Split};
use crate::grad::Tensor;

/// One model input: S windows of `L × d_s` ending at `t − h`, and `y_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedInstance {
    pub windows: Vec<Tensor>,
    pub target: f64,
    pub timestamp: i64,
    /// Row `t` of the target in the source dataset.
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    /// z-score the target with training statistics (Normal targets only).
    pub standardize_target: bool,
    /// Source that receives the lagged target as an extra feature column.
    pub ar_source: Option<usize>,
}

impl WindowSpec {
    pub fn new(lookback: usize) -> Self {
        Self { lookback, horizon: 1, standardize_target: false, ar_source: None }
    }
}

/// Training-split statistics used for z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<Vec<f64>>,
    pub feature_std: Vec<Vec<f64>>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    /// Raw-unit target from a standardized one.
    pub fn target_to_raw(&self, y: f64) -> f64 {
        self.target_mean + self.target_std * y
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    // constant columns pass through unscaled
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Feature columns per source, with the lagged-target column appended to
/// the AR source.
fn columns(ds: &MultiSourceDataset, ar_source: Option<usize>) -> Result<Vec<Vec<Vec<f64>>>> {
    if let Some(a) = ar_source {
        if a >= ds.sources.len() {
            return Err(DataError::Invalid(format!("ar source {} out of range (S = {})", a, ds.sources.len())));
        }
    }
    Ok(ds
        .sources
        .iter()
        .enumerate()
        .map(|(s, src)| {
            let mut cols: Vec<Vec<f64>> = (0..src.dim()).map(|c| src.column(c)).collect();
            if ar_source == Some(s) {
                cols.push(ds.target.clone());
            }
            cols
        })
        .collect())
}

/// Fits z-score statistics on the training rows.
pub fn fit_standardization(ds: &MultiSourceDataset, ar_source: Option<usize>) -> Result<Standardization> {
    ds.validate()?;
    let (train_end, _) = ds.split_rows();
    if train_end == 0 {
        return Err(DataError::Invalid("training split is empty".into()));
    }
    let cols = columns(ds, ar_source)?;
    let mut feature_mean = Vec::new();
    let mut feature_std = Vec::new();
    for src in &cols {
        let (m, s): (Vec<f64>, Vec<f64>) = src.iter().map(|c| mean_std(c[..train_end].iter().copied())).unzip();
        feature_mean.push(m);
        feature_std.push(s);
    }
    let (target_mean, target_std) = mean_std(ds.target[..train_end].iter().copied());
    Ok(Standardization { feature_mean, feature_std, target_mean, target_std })
}

#[derive(Clone, Debug)]
pub struct WindowedSplits {
    pub train: Vec<WindowedInstance>,
    pub val: Vec<WindowedInstance>,
    pub test: Vec<WindowedInstance>,
    pub stats: Standardization,
    pub input_dims: Vec<usize>,
    pub standardized_target: bool,
}

impl WindowedSplits {
    pub fn get(&self, split: Split) -> &[WindowedInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts the dataset into instances for `t ∈ [L + h, T)` whose windows cover
/// rows `t−h−L+1 ..= t−h`, assigns each to the split containing row `t`,
/// and z-scores features with training statistics.
pub fn window_and_split(ds: &MultiSourceDataset, spec: &WindowSpec) -> Result<WindowedSplits> {
    ds.splits.validate()?;
    let (l, h) = (spec.lookback, spec.horizon);
    if l == 0 || h == 0 {
        return Err(DataError::Invalid("lookback and horizon must be positive".into()));
    }
    let t_len = ds.len();
    if t_len <= l + h {
        return Err(DataError::Invalid(format!("series of length {} is too short for lookback {} and horizon {}", t_len, l, h)));
    }
    let stats = fit_standardization(ds, spec.ar_source)?;
    let cols = columns(ds, spec.ar_source)?;
    let scaled: Vec<Tensor> = cols
        .iter()
        .enumerate()
        .map(|(s, src)| {
            let d = src.len();
            let mut data = Vec::with_capacity(t_len * d);
            for r in 0..t_len {
                for (c, col) in src.iter().enumerate() {
                    data.push((col[r] - stats.feature_mean[s][c]) / stats.feature_std[s][c]);
                }
            }
            Tensor::new(t_len, d, data).expect("T × d")
        })
        .collect();
    let (train_end, val_end) = ds.split_rows();
    let mut out = WindowedSplits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        input_dims: cols.iter().map(|c| c.len()).collect(),
        stats,
        standardized_target: spec.standardize_target,
    };
    for t in (l + h)..t_len {
        let first = t - h + 1 - l;
        let windows = scaled
            .iter()
            .map(|m| {
                let d = m.cols();
                Tensor::new(l, d, m.data()[first * d..(first + l) * d].to_vec()).expect("L × d")
            })
            .collect();
        let y = ds.target[t];
        let target = if spec.standardize_target { (y - out.stats.target_mean) / out.stats.target_std } else { y };
        let inst = WindowedInstance { windows, target, timestamp: ds.timestamps[t], row: t };
        if t < train_end {
            out.train.push(inst);
        } else if t < val_end {
            out.val.push(inst);
        } else {
            out.test.push(inst);
        }
    }
    Ok(out)
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::new(8)
    }
}
