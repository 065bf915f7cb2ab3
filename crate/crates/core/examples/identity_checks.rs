//! Posterior-weighted gradient identity and the impartial upper bound on
//! random models.
//!
//! `cargo run --release --example identity_checks`

use msmix::training::{random_instance, verify_posterior_gradients, verify_impartial_bound};
use msmix::{DistKind, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dist in [DistKind::Normal, DistKind::LogNormal] {
        let cfg = ModelConfig::new(vec![3, 2, 4], 5, 6, dist, 7);
        let model = Model::new(cfg.clone())?;
        let insts: Vec<_> = (0..8).map(|_| random_instance(&cfg, &mut rng)).collect();
        let refs: Vec<_> = insts.iter().collect();
        let r = verify_posterior_gradients(&model, &refs)?;
        println!("{}: gradient identity max relative gap {:.2e} (eta {:.1e}, omega {:.1e}, theta {:.1e})", dist, r.max_rel, r.eta, r.omega, r.theta);
        for inst in insts.iter().take(3) {
            let b = verify_impartial_bound(&model, inst)?;
            println!("  loss {:.6} <= bound {:.6} (smallest weight {:.4})", b.loss, b.bound, b.a_star);
        }
    }
    Ok(())
}
