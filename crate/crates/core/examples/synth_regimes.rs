//! Regime-switching synthetic data and the Bayes filter that recovers the
//! active regime.
//!
//! `cargo run --example synth_regimes -- [seed]`

use msmix::dataio::{bayes_regime_filter, synth_generate, SynthConfig};
use msmix::DistKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |a| a.parse())?;
    let cfg = SynthConfig::new(3, 5000, DistKind::Normal, seed);
    let (ds, truth) = synth_generate(&cfg)?;
    println!("{} sources, dims {:?}, {} steps", ds.sources.len(), ds.input_dims(), ds.len());

    let mut occupancy = vec![0usize; cfg.n_sources];
    truth.regime.iter().for_each(|&z| occupancy[z] += 1);
    let switches = truth.regime.windows(2).filter(|w| w[0] != w[1]).count();
    println!("regime occupancy {:?}, {} switches", occupancy, switches);

    let filtered = bayes_regime_filter(&ds, &cfg, 1);
    let hits = filtered.iter().zip(&truth.regime).filter(|(a, b)| a == b).count();
    println!("filter recovers the regime on {:.1}% of steps", 100.0 * hits as f64 / ds.len() as f64);
    for t in 0..8 {
        println!("t={:<2} regime {} filter {} y {:+.4}", t, truth.regime[t], filtered[t], ds.target[t]);
    }
    Ok(())
}
