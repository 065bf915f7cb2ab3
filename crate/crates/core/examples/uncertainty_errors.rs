//! Test-set metrics and errors binned by predicted total uncertainty.
//!
//! `cargo run --release --example uncertainty_errors`

use msmix::dataio::{synth_generate, window_and_split, SynthConfig, WindowSpec};
use msmix::metrics::{evaluate, DEFAULT_BINS};
use msmix::training::{train, PhasedSchedule};
use msmix::{DistKind, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ds, _) = synth_generate(&SynthConfig::new(3, 4000, DistKind::Normal, 1))?;
    let window = WindowSpec::new(8);
    let data = window_and_split(&ds, &window)?;
    let cfg = ModelConfig::new(data.input_dims.clone(), window.lookback, 8, DistKind::Normal, 1);
    let schedule = PhasedSchedule { total_epochs: 15, impartial_epochs: 3, ..Default::default() };
    let (model, _) = train(&data, &cfg, &schedule)?;

    let outputs = model.forward_batch(&data.test)?;
    let y: Vec<f64> = data.test.iter().map(|i| i.target).collect();
    let report = evaluate(&outputs, &y, DEFAULT_BINS)?;
    println!("rmse {:.4}  mae {:.4}  nllm {:.4}  qlm {:.4}", report.rmse, report.mae, report.nllm, report.qlm);
    for b in &report.unc_bins {
        println!("bin {}  uncertainty [{:.4}, {:.4}]  n {:>4}  rmse {:.4}", b.index, b.lo, b.hi, b.count, b.rmse.unwrap_or(f64::NAN));
    }
    println!("Spearman(bin, rmse) = {:?}", report.spearman);
    Ok(())
}
