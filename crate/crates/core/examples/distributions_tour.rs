//! Densities, moments, CDFs and sampling of the two output families.
//!
//! `cargo run --example distributions_tour`

use msmix::{DistKind, DistParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = DistParams::new(0.5, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [DistKind::Normal, DistKind::LogNormal] {
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| kind.sample(&p, &mut rng)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        println!("{} (mu 0.5, sigma2 0.25)", kind);
        println!("  log p(1.0)   {:.6}", kind.log_pdf(&p, 1.0)?);
        println!("  cdf(1.0)     {:.6}", kind.cdf(&p, 1.0));
        println!("  mean         {:.6} (sample {:.6})", kind.mean(&p), m);
        println!("  variance     {:.6}", kind.variance(&p));
        println!("  supports -1  {}", kind.supports(-1.0));
    }
    Ok(())
}
