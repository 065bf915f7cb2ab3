//! Phased versus direct training on regime-switching synthetic data.
//!
//! `cargo run --release --example phased_vs_direct -- [seeds] [epochs]`

use msmix::study::{median, run_study, StudyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().map_or(Ok(5), |a| a.parse())?;
    let mut cfg = StudyConfig { seeds: (0..n_seeds).collect(), ..Default::default() };
    if let Some(e) = args.next() {
        cfg.schedule.total_epochs = e.parse()?;
        cfg.schedule.impartial_epochs = cfg.schedule.total_epochs / 6;
    }
    let start = std::time::Instant::now();
    let results = run_study(&cfg)?;
    println!("seed  oracle  | phased rmse  spread  acc    rho   | direct rmse  spread  acc    rho");
    for r in &results {
        let rho = |v: Option<f64>| v.map_or("  -  ".to_string(), |x| format!("{:+.2}", x));
        println!(
            "{:>4}  {:.3}   | {:.4}      {:.4}  {:.3}  {}  | {:.4}      {:.4}  {:.3}  {}",
            r.seed,
            r.oracle_accuracy,
            r.phased.test_rmse,
            r.phased.spread,
            r.phased.regime_accuracy,
            rho(r.phased.spearman),
            r.direct.test_rmse,
            r.direct.spread,
            r.direct.regime_accuracy,
            rho(r.direct.spearman)
        );
    }
    let med = |f: &dyn Fn(&msmix::study::SeedResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
    println!(
        "median test rmse: phased {:.4}, direct {:.4}; median spread: phased {:.4}, direct {:.4}",
        med(&|r| r.phased.test_rmse),
        med(&|r| r.direct.test_rmse),
        med(&|r| r.phased.spread),
        med(&|r| r.direct.spread)
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
