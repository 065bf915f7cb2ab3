use std::path::Path;

use serde::Deserialize;

use super::trades::csv_error;
use super::{DataError, IntervalGrid, Result, SourceSeries};
use crate::grad::Tensor;

pub const DEFAULT_DEPTH_FRACTIONS: [f64; 3] = [0.01, 0.05, 0.10];

/// Relative slack when comparing cumulative depth against a fraction of
/// the total, so that e.g. `0.1 · 10` reaches level one exactly.
const DEPTH_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LobSnapshot {
    pub timestamp: f64,
    /// Price-descending `(price, size)`.
    pub bids: Vec<(f64, f64)>,
    /// Price-ascending `(price, size)`.
    pub asks: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LobConfig {
    pub depth_fractions: Vec<f64>,
    /// Floor for the price offset in the slope denominator.
    pub tick: f64,
}

impl Default for LobConfig {
    fn default() -> Self {
        Self { depth_fractions: DEFAULT_DEPTH_FRACTIONS.to_vec(), tick: 0.01 }
    }
}

pub fn lob_feature_names(fractions: &[f64]) -> Vec<String> {
    let mut names: Vec<String> = ["spread", "ask_volume", "bid_volume", "volume_imbalance"].iter().map(|s| s.to_string()).collect();
    for p in fractions {
        let tag = format!("{}pct", (p * 100.0).round() as i64);
        names.push(format!("ask_slope_{}", tag));
        names.push(format!("bid_slope_{}", tag));
        names.push(format!("slope_imbalance_{}", tag));
    }
    names
}

/// Cumulative volume from the best level until it reaches `p` of the side
/// total, divided by that level's price offset (floored at `tick`).
fn slope(levels: &[(f64, f64)], total: f64, p: f64, tick: f64) -> f64 {
    let best = levels[0].0;
    let need = p * total * (1.0 - DEPTH_EPS);
    let mut cum = 0.0;
    for &(price, size) in levels {
        cum += size;
        if cum >= need {
            return cum / (price - best).abs().max(tick);
        }
    }
    let last = levels[levels.len() - 1].0;
    cum / (last - best).abs().max(tick)
}

/// Features of one snapshot, or `None` when a side is empty.
pub fn snapshot_features(snap: &LobSnapshot, cfg: &LobConfig) -> Option<Vec<f64>> {
    if snap.bids.is_empty() || snap.asks.is_empty() {
        return None;
    }
    let ask_vol: f64 = snap.asks.iter().map(|l| l.1).sum();
    let bid_vol: f64 = snap.bids.iter().map(|l| l.1).sum();
    let mut f = vec![snap.asks[0].0 - snap.bids[0].0, ask_vol, bid_vol, (ask_vol - bid_vol).abs()];
    for &p in &cfg.depth_fractions {
        let a = slope(&snap.asks, ask_vol, p, cfg.tick);
        let b = slope(&snap.bids, bid_vol, p, cfg.tick);
        f.extend([a, b, (a - b).abs()]);
    }
    Some(f)
}

fn check_snapshot(snap: &LobSnapshot, index: usize) -> Result<()> {
    let bad = |m: &str| Err(DataError::Invalid(format!("snapshot {} at t={}: {}", index, snap.timestamp, m)));
    if snap.bids.windows(2).any(|w| w[1].0 >= w[0].0) {
        return bad("bids must be strictly price-descending");
    }
    if snap.asks.windows(2).any(|w| w[1].0 <= w[0].0) {
        return bad("asks must be strictly price-ascending");
    }
    if snap.bids.iter().chain(&snap.asks).any(|l| !(l.1 > 0.0) || !l.0.is_finite() || !l.1.is_finite()) {
        return bad("level sizes must be positive and finite");
    }
    if let (Some(b), Some(a)) = (snap.bids.first(), snap.asks.first()) {
        if b.0 >= a.0 {
            return bad("best bid must be below best ask");
        }
    }
    Ok(())
}

/// Averages per-snapshot features within each grid interval. Snapshots with
/// an empty side are skipped; intervals without a usable snapshot carry the
/// previous interval forward. Leading intervals before the first usable
/// snapshot are dropped, so the series may start after `grid.start`.
pub fn featurize_lob(snapshots: &[LobSnapshot], grid: &IntervalGrid, cfg: &LobConfig, source_id: &str, market_id: &str) -> Result<SourceSeries> {
    if let Some(i) = snapshots.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(DataError::Unsorted { what: "order-book snapshots", index: i + 1 });
    }
    if cfg.depth_fractions.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) || !(cfg.tick > 0.0) {
        return Err(DataError::Invalid("depth fractions must lie in (0, 1] and tick must be positive".into()));
    }
    let d = 4 + 3 * cfg.depth_fractions.len();
    let mut sums = vec![vec![0.0; d]; grid.len];
    let mut counts = vec![0usize; grid.len];
    for (i, snap) in snapshots.iter().enumerate() {
        check_snapshot(snap, i)?;
        let Some(k) = grid.index_of(snap.timestamp) else { continue };
        if let Some(f) = snapshot_features(snap, cfg) {
            for (acc, v) in sums[k].iter_mut().zip(f) {
                *acc += v;
            }
            counts[k] += 1;
        }
    }
    let Some(first) = counts.iter().position(|&c| c > 0) else {
        return Err(DataError::Invalid(format!("order-book source {} has no usable snapshot", source_id)));
    };
    let mut rows: Vec<f64> = Vec::with_capacity((grid.len - first) * d);
    let mut prev: Vec<f64> = Vec::new();
    for k in first..grid.len {
        if counts[k] > 0 {
            let n = counts[k] as f64;
            prev = sums[k].iter().map(|s| s / n).collect();
        }
        rows.extend_from_slice(&prev);
    }
    let timestamps = grid.timestamps()[first..].to_vec();
    Ok(SourceSeries {
        source_id: source_id.to_string(),
        market_id: market_id.to_string(),
        feature_names: lob_feature_names(&cfg.depth_fractions),
        values: Tensor::new(timestamps.len(), d, rows).expect("d columns"),
        timestamps,
        interval_seconds: grid.interval_seconds,
    })
}

#[derive(Deserialize)]
struct LobRow {
    timestamp: f64,
    level: usize,
    side: String,
    price: f64,
    size: f64,
}

/// Reads long-format `timestamp,level,side,price,size` rows (level 0 is the
/// best quote) and groups them into snapshots.
pub fn read_lob_csv(path: &Path) -> Result<Vec<LobSnapshot>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: Vec<LobSnapshot> = Vec::new();
    let mut line = 1u64;
    for rec in rdr.deserialize::<LobRow>() {
        line += 1;
        let row = rec.map_err(|e| csv_error(path, e))?;
        let parse_err = |m: String| DataError::Parse { path: path.into(), line, message: m };
        if !row.timestamp.is_finite() || !(row.price > 0.0) || !(row.size > 0.0) {
            return Err(parse_err("timestamp must be finite and price, size positive".into()));
        }
        if out.last().map(|s| s.timestamp) != Some(row.timestamp) {
            out.push(LobSnapshot { timestamp: row.timestamp, bids: Vec::new(), asks: Vec::new() });
        }
        let snap = out.last_mut().expect("pushed above");
        let side = match row.side.to_ascii_lowercase().as_str() {
            "bid" | "buy" => &mut snap.bids,
            "ask" | "sell" => &mut snap.asks,
            other => return Err(parse_err(format!("side must be bid or ask, got '{}'", other))),
        };
        if row.level != side.len() {
            return Err(parse_err(format!("expected level {} on this side, got {}", side.len(), row.level)));
        }
        side.push((row.price, row.size));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(ts: f64, bids: &[(f64, f64)], asks: &[(f64, f64)]) -> LobSnapshot {
        LobSnapshot { timestamp: ts, bids: bids.to_vec(), asks: asks.to_vec() }
    }

    #[test]
    fn single_level_book() {
        let f = snapshot_features(&snap(0.0, &[(100.0, 3.0)], &[(100.5, 2.0)]), &LobConfig::default()).unwrap();
        assert_eq!(&f[..4], &[0.5, 2.0, 3.0, 1.0]);
        // best level alone satisfies every fraction, offset floored at the tick
        assert_eq!(&f[4..7], &[200.0, 300.0, 100.0]);
        assert_eq!(f.len(), 13);
    }

    #[test]
    fn zero_offset_floor() {
        let cfg = LobConfig::default();
        let asks = [(100.5, 1.0), (101.5, 9.0)];
        let s = slope(&asks, 10.0, 0.10, cfg.tick);
        assert_eq!(s, 100.0);
        // 20% needs the second level: C = 10 at offset 1
        assert_eq!(slope(&asks, 10.0, 0.20, cfg.tick), 10.0);
    }

    #[test]
    fn symmetric_book_has_no_slope_imbalance() {
        let b = snap(0.0, &[(99.0, 1.0), (98.0, 2.0), (97.0, 5.0)], &[(101.0, 1.0), (102.0, 2.0), (103.0, 5.0)]);
        let f = snapshot_features(&b, &LobConfig::default()).unwrap();
        assert_eq!(f[3], 0.0);
        assert_eq!([f[6], f[9], f[12]], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn gaps_are_forward_filled_and_leading_gap_dropped() {
        let grid = IntervalGrid { start: 0, interval_seconds: 60, len: 4 };
        let snaps = [
            snap(70.0, &[(99.0, 1.0)], &[(101.0, 1.0)]),
            snap(80.0, &[(99.0, 3.0)], &[(101.0, 1.0)]),
            snap(190.0, &[], &[(101.0, 1.0)]),
        ];
        let s = featurize_lob(&snaps, &grid, &LobConfig::default(), "lob", "m").unwrap();
        assert_eq!(s.timestamps, vec![60, 120, 180]);
        assert_eq!(s.values.get(0, 2), 2.0);
        assert_eq!(s.values.row_slice(1), s.values.row_slice(0));
        assert_eq!(s.values.row_slice(2), s.values.row_slice(0));
    }

    #[test]
    fn crossed_book_is_rejected() {
        let grid = IntervalGrid { start: 0, interval_seconds: 60, len: 1 };
        let snaps = [snap(0.0, &[(101.0, 1.0)], &[(100.0, 1.0)])];
        assert!(featurize_lob(&snaps, &grid, &LobConfig::default(), "lob", "m").is_err());
    }
}
