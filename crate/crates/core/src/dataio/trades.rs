use std::path::Path;

use serde::Deserialize;

use super::{DataError, IntervalGrid, Result, SourceSeries};
use crate::grad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawTrade {
    /// Epoch seconds.
    pub timestamp: f64,
    pub price: f64,
    pub size: f64,
    pub side: Side,
}

pub fn trade_feature_names() -> Vec<String> {
    ["buy_volume", "sell_volume", "volume_imbalance", "buy_count", "sell_count", "count_imbalance"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Sum of values in ascending order, so the result does not depend on the
/// arrival order of trades inside an interval.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Six transaction features per interval: buy volume, sell volume, their
/// absolute difference, buy count, sell count and their absolute difference.
/// Trades outside `grid` are ignored; empty intervals are all zero.
pub fn featurize_trades(trades: &[RawTrade], grid: &IntervalGrid, source_id: &str, market_id: &str) -> Result<SourceSeries> {
    if let Some(i) = trades.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(DataError::Unsorted { what: "trades", index: i + 1 });
    }
    let mut buys: Vec<Vec<f64>> = vec![Vec::new(); grid.len];
    let mut sells: Vec<Vec<f64>> = vec![Vec::new(); grid.len];
    for t in trades {
        if let Some(k) = grid.index_of(t.timestamp) {
            match t.side {
                Side::Buy => buys[k].push(t.size),
                Side::Sell => sells[k].push(t.size),
            }
        }
    }
    let mut data = Vec::with_capacity(grid.len * 6);
    for (b, s) in buys.iter_mut().zip(sells.iter_mut()) {
        let (nb, ns) = (b.len() as f64, s.len() as f64);
        let (vb, vs) = (canonical_sum(b), canonical_sum(s));
        data.extend([vb, vs, (vb - vs).abs(), nb, ns, (nb - ns).abs()]);
    }
    Ok(SourceSeries {
        source_id: source_id.to_string(),
        market_id: market_id.to_string(),
        feature_names: trade_feature_names(),
        timestamps: grid.timestamps(),
        values: Tensor::new(grid.len, 6, data).expect("6 columns"),
        interval_seconds: grid.interval_seconds,
    })
}

/// Traded volume (buy + sell) of a transaction source.
pub fn make_target(trade_series: &SourceSeries) -> Vec<f64> {
    (0..trade_series.len()).map(|r| trade_series.values.get(r, 0) + trade_series.values.get(r, 1)).collect()
}

#[derive(Deserialize)]
struct TradeRow {
    timestamp: f64,
    price: f64,
    size: f64,
    side: String,
}

/// Reads `timestamp,price,size,side` rows.
pub fn read_trades_csv(path: &Path) -> Result<Vec<RawTrade>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<TradeRow>() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        let line = out.len() as u64 + 2;
        let side = match row.side.to_ascii_lowercase().as_str() {
            "buy" => Side::Buy,
            "sell" => Side::Sell,
            other => return Err(DataError::Parse { path: path.into(), line, message: format!("side must be buy or sell, got '{}'", other) }),
        };
        if !(row.size > 0.0 && row.size.is_finite()) || !(row.price > 0.0 && row.price.is_finite()) || !row.timestamp.is_finite() {
            return Err(DataError::Parse { path: path.into(), line, message: "price and size must be positive and finite".into() });
        }
        out.push(RawTrade { timestamp: row.timestamp, price: row.price, size: row.size, side });
    }
    Ok(out)
}

pub(super) fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io { path: path.into(), source },
        other => DataError::Parse { path: path.into(), line, message: describe_csv(other) },
    }
}

fn describe_csv(kind: csv::ErrorKind) -> String {
    match kind {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => format!("expected {} fields, found {}", expected_len, len),
        other => format!("{:?}", other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trade(ts: f64, size: f64, side: Side) -> RawTrade {
        RawTrade { timestamp: ts, price: 100.0, size, side }
    }

    fn grid(len: usize) -> IntervalGrid {
        IntervalGrid { start: 0, interval_seconds: 300, len }
    }

    #[test]
    fn hand_fixture() {
        let trades = [trade(10.0, 0.5, Side::Buy), trade(20.0, 0.1, Side::Sell), trade(299.0, 0.3, Side::Buy)];
        let s = featurize_trades(&trades, &grid(2), "t", "m").unwrap();
        // |0.8 − 0.1| is 0.7000000000000001 in binary64
        assert_eq!(s.values.row_slice(0), &[0.8, 0.1, 0.700_000_000_000_000_1, 2.0, 1.0, 1.0]);
        assert_eq!(s.values.row_slice(1), &[0.0; 6]);
        assert_eq!(make_target(&s), vec![0.9, 0.0]);
    }

    #[test]
    fn swapping_sides_swaps_columns() {
        let trades = [trade(1.0, 0.25, Side::Buy), trade(2.0, 1.5, Side::Sell), trade(400.0, 2.0, Side::Sell)];
        let flipped: Vec<_> = trades
            .iter()
            .map(|t| RawTrade { side: if t.side == Side::Buy { Side::Sell } else { Side::Buy }, ..*t })
            .collect();
        let a = featurize_trades(&trades, &grid(2), "a", "m").unwrap();
        let b = featurize_trades(&flipped, &grid(2), "b", "m").unwrap();
        for r in 0..2 {
            let (x, y) = (a.values.row_slice(r), b.values.row_slice(r));
            assert_eq!([x[0], x[1], x[2], x[3], x[4], x[5]], [y[1], y[0], y[2], y[4], y[3], y[5]]);
        }
    }

    #[test]
    fn order_within_interval_does_not_matter() {
        let a = [trade(5.0, 0.1, Side::Buy), trade(5.0, 0.2, Side::Buy), trade(5.0, 0.3, Side::Buy)];
        let b = [a[2], a[0], a[1]];
        let fa = featurize_trades(&a, &grid(1), "a", "m").unwrap();
        let fb = featurize_trades(&b, &grid(1), "a", "m").unwrap();
        assert_eq!(fa.values, fb.values);
    }

    #[test]
    fn unsorted_is_rejected() {
        let trades = [trade(20.0, 1.0, Side::Buy), trade(10.0, 1.0, Side::Sell)];
        assert!(matches!(featurize_trades(&trades, &grid(1), "a", "m"), Err(DataError::Unsorted { index: 1, .. })));
    }
}
