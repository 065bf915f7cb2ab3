//! Train a small mixture model, save and reload it, and print predictive
//! quantiles and intervals for a few test instances.
//!
//! `cargo run --release --example forecast_intervals`

use msmix::checkpoint::Checkpoint;
use msmix::dataio::{synth_generate, window_and_split, SynthConfig, WindowSpec};
use msmix::inference::forecast;
use msmix::training::{train, PhasedSchedule};
use msmix::{DistKind, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ds, _) = synth_generate(&SynthConfig::new(3, 3000, DistKind::LogNormal, 4))?;
    let window = WindowSpec::new(8);
    let data = window_and_split(&ds, &window)?;
    let cfg = ModelConfig::new(data.input_dims.clone(), window.lookback, 8, DistKind::LogNormal, 4);
    let schedule = PhasedSchedule { total_epochs: 12, impartial_epochs: 2, ..Default::default() };
    let (model, diag) = train(&data, &cfg, &schedule)?;
    println!("kept epoch {} (validation NLL {:.4})", diag.best_epoch, diag.val_nll[diag.best_epoch]);

    let path = std::env::temp_dir().join("msmix_forecast_intervals.json");
    Checkpoint::from_model(&model, Some(&window)).save(&path)?;
    let model = Checkpoint::load(&path)?.to_model()?;

    for inst in data.test.iter().take(5) {
        let f = forecast(&model.forward(inst)?, &[0.1, 0.5, 0.9], &[(0.05, 0.95)])?;
        let (_, _, lo, hi) = f.intervals[0];
        println!(
            "y {:.4}  mean {:.4}  median {:.4}  90% interval [{:.4}, {:.4}]  aleatoric {:.4} mixture {:.4}",
            inst.target, f.mean, f.quantiles[1].1, lo, hi, f.aleatoric, f.mixture_unc
        );
    }
    Ok(())
}
