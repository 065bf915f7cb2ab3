//! Dataset bundle: `source_<id>.csv` per source (header = feature names),
//! `target.csv` (`timestamp,y`) and `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trades::csv_error;
use super::{fit_standardization, DataError, MultiSourceDataset, Result, SeasonalProfile, SourceSeries, SplitFractions, Standardization, SynthConfig, SynthGroundTruth};
use crate::distributions::DistParams;
use crate::grad::Tensor;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceMeta {
    pub id: String,
    pub market: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub version: u32,
    pub interval_seconds: i64,
    pub sources: Vec<SourceMeta>,
    pub splits: SplitFractions,
    /// `(train_end, val_end)` row boundaries.
    pub split_rows: (usize, usize),
    pub standardization: Standardization,
    pub seasonal_profile: Option<SeasonalProfile>,
    /// Generator settings for synthetic bundles.
    pub synthetic: Option<SynthConfig>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.into(), source }
}

fn fmt(v: f64) -> String {
    // Display is the shortest representation that parses back exactly
    format!("{}", v)
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    Ok((header, rows))
}

fn parse<T: std::str::FromStr>(path: &Path, row: usize, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| DataError::Parse { path: path.into(), line: row as u64 + 2, message: format!("cannot parse '{}'", field) })
}

pub fn write_bundle(dir: &Path, ds: &MultiSourceDataset, synthetic: Option<&SynthConfig>) -> Result<BundleMeta> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for s in &ds.sources {
        let path = dir.join(format!("source_{}.csv", s.source_id));
        write_csv(&path, &s.feature_names, (0..s.len()).map(|r| s.values.row_slice(r).iter().map(|v| fmt(*v)).collect()))?;
    }
    let path = dir.join("target.csv");
    write_csv(
        &path,
        &["timestamp".into(), "y".into()],
        ds.timestamps.iter().zip(&ds.target).map(|(t, y)| vec![t.to_string(), fmt(*y)]),
    )?;
    let meta = BundleMeta {
        version: BUNDLE_VERSION,
        interval_seconds: ds.interval_seconds,
        sources: ds.sources.iter().map(|s| SourceMeta { id: s.source_id.clone(), market: s.market_id.clone(), dim: s.dim() }).collect(),
        splits: ds.splits,
        split_rows: ds.split_rows(),
        standardization: fit_standardization(ds, None)?,
        seasonal_profile: ds.seasonal_profile.clone(),
        synthetic: synthetic.cloned(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|source| DataError::Json { path: path.clone(), source })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(meta)
}

pub fn read_bundle(dir: &Path) -> Result<(MultiSourceDataset, BundleMeta)> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.clone(), source })?;
    if meta.version != BUNDLE_VERSION {
        return Err(DataError::Invalid(format!("bundle version {} is not supported (expected {})", meta.version, BUNDLE_VERSION)));
    }
    let path = dir.join("target.csv");
    let (_, rows) = read_csv(&path)?;
    let mut timestamps = Vec::with_capacity(rows.len());
    let mut target = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != 2 {
            return Err(DataError::Parse { path: path.clone(), line: i as u64 + 2, message: "expected timestamp,y".into() });
        }
        timestamps.push(parse::<i64>(&path, i, &r[0])?);
        target.push(parse::<f64>(&path, i, &r[1])?);
    }
    let mut sources = Vec::new();
    for sm in &meta.sources {
        let path = dir.join(format!("source_{}.csv", sm.id));
        let (header, rows) = read_csv(&path)?;
        if header.len() != sm.dim || rows.len() != timestamps.len() {
            return Err(DataError::Invalid(format!("{}: expected {} rows of {} features", path.display(), timestamps.len(), sm.dim)));
        }
        let mut data = Vec::with_capacity(rows.len() * sm.dim);
        for (i, r) in rows.iter().enumerate() {
            for f in r {
                data.push(parse::<f64>(&path, i, f)?);
            }
        }
        sources.push(SourceSeries {
            source_id: sm.id.clone(),
            market_id: sm.market.clone(),
            feature_names: header,
            timestamps: timestamps.clone(),
            values: Tensor::new(rows.len(), sm.dim, data).expect("rows × dim"),
            interval_seconds: meta.interval_seconds,
        });
    }
    let ds = MultiSourceDataset {
        sources,
        timestamps,
        interval_seconds: meta.interval_seconds,
        target,
        seasonal_profile: meta.seasonal_profile.clone(),
        splits: meta.splits,
    };
    ds.validate()?;
    Ok((ds, meta))
}

/// Writes `ground_truth.csv` with `timestamp,regime,mu,sigma2,cond_mean,cond_var`.
pub fn write_ground_truth(dir: &Path, timestamps: &[i64], gt: &SynthGroundTruth) -> Result<()> {
    let header: Vec<String> = ["timestamp", "regime", "mu", "sigma2", "cond_mean", "cond_var"].iter().map(|s| s.to_string()).collect();
    let rows = (0..gt.regime.len()).map(|t| {
        vec![
            timestamps[t].to_string(),
            gt.regime[t].to_string(),
            fmt(gt.component[t].mu),
            fmt(gt.component[t].sigma2),
            fmt(gt.cond_mean[t]),
            fmt(gt.cond_var[t]),
        ]
    });
    write_csv(&dir.join("ground_truth.csv"), &header, rows)
}

pub fn read_ground_truth(dir: &Path, meta: &BundleMeta) -> Result<SynthGroundTruth> {
    let path = dir.join("ground_truth.csv");
    let (_, rows) = read_csv(&path)?;
    let mut gt = SynthGroundTruth { regime: Vec::new(), component: Vec::new(), cond_mean: Vec::new(), cond_var: Vec::new(), regime_sigma: Vec::new() };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != 6 {
            return Err(DataError::Parse { path: path.clone(), line: i as u64 + 2, message: "expected 6 fields".into() });
        }
        gt.regime.push(parse(&path, i, &r[1])?);
        gt.component.push(DistParams::new(parse(&path, i, &r[2])?, parse(&path, i, &r[3])?));
        gt.cond_mean.push(parse(&path, i, &r[4])?);
        gt.cond_var.push(parse(&path, i, &r[5])?);
    }
    if let Some(cfg) = &meta.synthetic {
        let n = cfg.n_sources;
        let mut sig: Vec<f64> = (0..n).map(|s| cfg.regime_sigma[s % cfg.regime_sigma.len()]).collect();
        if let Some(p) = &cfg.label_permutation {
            let base = sig.clone();
            for (s, &q) in p.iter().enumerate() {
                sig[q] = base[s];
            }
        }
        gt.regime_sigma = sig;
    }
    Ok(gt)
}
