use std::path::PathBuf;

use msmix::dataio::{
    featurize_lob, featurize_trades, make_target, read_bundle, read_ground_truth, read_lob_csv, read_trades_csv, synth_generate, window_and_split, write_bundle,
    write_ground_truth, IntervalGrid, LobConfig, Side, SynthConfig, WindowSpec,
};
use msmix::DistKind;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn lob_reader_groups_long_rows() {
    let snaps = read_lob_csv(&fixture("mkt_a_lob.csv")).unwrap();
    let times: Vec<f64> = snaps.iter().map(|s| s.timestamp).collect();
    assert_eq!(times, [0.0, 30.0, 125.0, 150.0]);
    assert_eq!(snaps[0].asks, [(100.5, 0.25), (101.0, 0.5), (102.5, 9.25)]);
    assert_eq!(snaps[0].bids, [(100.0, 1.0), (99.0, 3.0)]);
    assert!(snaps[2].asks.is_empty());
}

#[test]
fn target_matches_raw_trade_volume() {
    let trades = read_trades_csv(&fixture("mkt_a_trades.csv")).unwrap();
    let grid = IntervalGrid::covering(0.0, 239.0, 60).unwrap();
    let target = make_target(&featurize_trades(&trades, &grid, "a", "a").unwrap());
    let mut recomputed = vec![0.0; grid.len];
    for t in &trades {
        recomputed[(t.timestamp / 60.0) as usize] += t.size;
    }
    assert_eq!(target, recomputed);
}

#[test]
fn swapping_sides_swaps_columns() {
    let trades = read_trades_csv(&fixture("mkt_a_trades.csv")).unwrap();
    let swapped: Vec<_> = trades
        .iter()
        .map(|t| {
            let mut t = *t;
            t.side = if t.side == Side::Buy { Side::Sell } else { Side::Buy };
            t
        })
        .collect();
    let grid = IntervalGrid::covering(0.0, 200.0, 60).unwrap();
    let a = featurize_trades(&trades, &grid, "a", "a").unwrap();
    let b = featurize_trades(&swapped, &grid, "a", "a").unwrap();
    for r in 0..grid.len {
        let (x, y) = (a.values.row_slice(r), b.values.row_slice(r));
        assert_eq!([x[0], x[1], x[2], x[3], x[4], x[5]], [y[1], y[0], y[2], y[4], y[3], y[5]]);
    }
}

#[test]
fn leading_book_gap_is_dropped() {
    let snaps = read_lob_csv(&fixture("mkt_b_lob.csv")).unwrap();
    let grid = IntervalGrid::covering(0.0, 200.0, 60).unwrap();
    let lob = featurize_lob(&snaps, &grid, &LobConfig::default(), "b", "b").unwrap();
    assert_eq!(lob.timestamps, vec![60, 120, 180]);
    assert!((0..lob.len()).all(|r| lob.values.row_slice(r).iter().all(|v| *v >= 0.0)));
}

#[test]
fn synthetic_bundle_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(3, 1000, DistKind::LogNormal, 5);
    let (ds, truth) = synth_generate(&cfg).unwrap();
    assert!(ds.target.iter().all(|y| *y > 0.0));
    write_bundle(tmp.path(), &ds, Some(&cfg)).unwrap();
    write_ground_truth(tmp.path(), &ds.timestamps, &truth).unwrap();
    let (back, meta) = read_bundle(tmp.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(read_ground_truth(tmp.path(), &meta).unwrap(), truth);

    let splits = window_and_split(&back, &WindowSpec::new(6)).unwrap();
    assert_eq!(splits.input_dims, ds.input_dims());
    // six-step lookback plus one-step horizon
    assert_eq!(splits.len(), 1000 - 6 - 1);
}
