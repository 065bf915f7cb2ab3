//! Transaction and order-book features for two markets on a shared grid.
//!
//! `cargo run --example featurize_market`

use std::path::PathBuf;

use msmix::dataio::{featurize_markets, read_lob_csv, read_trades_csv, LobConfig, MarketInput, SplitFractions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let markets = ["a", "b"]
        .iter()
        .map(|m| -> Result<MarketInput, msmix::dataio::DataError> {
            Ok(MarketInput {
                market_id: m.to_string(),
                trades: read_trades_csv(&dir.join(format!("mkt_{}_trades.csv", m)))?,
                snapshots: read_lob_csv(&dir.join(format!("mkt_{}_lob.csv", m)))?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let lob = LobConfig { tick: 0.25, ..LobConfig::default() };
    let ds = featurize_markets(&markets, 60, &lob, 0, SplitFractions::default())?;
    println!("timestamps {:?}, target {:?}", ds.timestamps, ds.target);
    for s in &ds.sources {
        println!("{} ({} features)", s.source_id, s.dim());
        for (r, t) in s.timestamps.iter().enumerate() {
            println!("  {:>4}  {:?}", t, s.values.row_slice(r));
        }
    }
    Ok(())
}
