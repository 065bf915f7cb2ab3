use super::{Result, TrainError};
use crate::distributions::DistKind;
use crate::grad::{log_sum_exp, Result as GradResult, Tape, Var};
use crate::model::MixtureOutput;

/// `log p_s(y)` for every source.
pub fn component_log_densities(out: &MixtureOutput, y: f64) -> Result<Vec<f64>> {
    if out.kind == DistKind::LogNormal && y <= 0.0 {
        return Err(TrainError::NonPositiveTarget { instance: 0, value: y });
    }
    Ok(out.dist_params.iter().map(|p| out.kind.log_pdf(p, y).expect("support checked above")).collect())
}

fn log_joint(out: &MixtureOutput, y: f64) -> Result<Vec<f64>> {
    let lp = component_log_densities(out, y)?;
    Ok(out.weights.iter().zip(lp).map(|(w, l)| w.ln() + l).collect())
}

/// `−log Σ_s w_s p_s(y)` for one instance.
pub fn instance_nll(out: &MixtureOutput, y: f64) -> Result<f64> {
    Ok(-log_sum_exp(&log_joint(out, y)?))
}

fn mean_over<F>(outputs: &[MixtureOutput], targets: &[f64], f: F) -> Result<f64>
where
    F: Fn(&MixtureOutput, f64) -> Result<f64>,
{
    if outputs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    assert_eq!(outputs.len(), targets.len(), "one target per output");
    let mut total = 0.0;
    for (i, (o, &y)) in outputs.iter().zip(targets).enumerate() {
        let v = f(o, y).map_err(|e| match e {
            TrainError::NonPositiveTarget { value, .. } => TrainError::NonPositiveTarget { instance: i, value },
            other => other,
        })?;
        if !v.is_finite() {
            return Err(TrainError::NonFinite { instance: i, value: v });
        }
        total += v;
    }
    Ok(total / outputs.len() as f64)
}

/// Mixture negative log-likelihood averaged over instances.
pub fn mixture_nll(outputs: &[MixtureOutput], targets: &[f64]) -> Result<f64> {
    mean_over(outputs, targets, instance_nll)
}

/// Equal-weighted per-source negative log-likelihood, averaged over
/// instances. The mixture weights do not enter.
pub fn impartial_loss(outputs: &[MixtureOutput], targets: &[f64]) -> Result<f64> {
    mean_over(outputs, targets, |o, y| {
        let lp = component_log_densities(o, y)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    })
}

/// Posterior source probabilities `π_s ∝ w_s p_s(y)`.
pub fn posterior_weights(out: &MixtureOutput, y: f64) -> Result<Vec<f64>> {
    let lj = log_joint(out, y)?;
    let lse = log_sum_exp(&lj);
    if !lse.is_finite() {
        return Err(TrainError::DensityUnderflow);
    }
    Ok(lj.iter().map(|v| (v - lse).exp()).collect())
}

/// Tape version of [`mixture_nll`] from B × S log-weights and log-densities.
pub fn mixture_nll_graph(tape: &mut Tape, log_weights: Var, log_dens: Var) -> GradResult<Var> {
    let joint = tape.add(log_weights, log_dens)?;
    let per_instance = tape.log_sum_exp(joint)?;
    let m = tape.mean(per_instance)?;
    Ok(tape.neg(m))
}

/// Tape version of [`impartial_loss`]; touches only the log-densities.
pub fn impartial_loss_graph(tape: &mut Tape, log_dens: Var) -> GradResult<Var> {
    let m = tape.mean(log_dens)?;
    Ok(tape.neg(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistParams;

    fn output(weights: &[f64], params: &[(f64, f64)]) -> MixtureOutput {
        MixtureOutput {
            kind: DistKind::Normal,
            weights: weights.to_vec(),
            dist_params: params.iter().map(|&(m, v)| DistParams::new(m, v)).collect(),
            reps: vec![Vec::new(); weights.len()],
        }
    }

    #[test]
    fn mixture_nll_examples() {
        let one = output(&[1.0], &[(0.0, 1.0)]);
        assert!((mixture_nll(&[one.clone()], &[0.0]).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-15);
        let twin = output(&[0.5, 0.5], &[(0.0, 1.0), (0.0, 1.0)]);
        assert!((mixture_nll(&[twin], &[0.0]).unwrap() - mixture_nll(&[one], &[0.0]).unwrap()).abs() < 1e-15);
        // mpmath: −ln(0.5·φ(0) + 0.5·φ(−1))
        let two = output(&[0.5, 0.5], &[(0.0, 1.0), (1.0, 1.0)]);
        assert!((mixture_nll(&[two], &[0.0]).unwrap() - 1.138_008_729_584_511).abs() < 1e-14);
    }

    #[test]
    fn impartial_examples() {
        let one = output(&[1.0], &[(0.3, 2.0)]);
        assert_eq!(impartial_loss(&[one.clone()], &[1.1]).unwrap(), mixture_nll(&[one], &[1.1]).unwrap());
        // log-densities −1 and −3: σ² = 1/(2π) at the mean gives log p = 0, shift by the quadratic term
        let v = 1.0 / (2.0 * std::f64::consts::PI);
        let two = output(&[0.9, 0.1], &[(0.0, v), (0.0, v)]);
        let y1 = (2.0 * v).sqrt();
        let lp = component_log_densities(&two, y1).unwrap();
        assert!((lp[0] - -1.0).abs() < 1e-14);
        let three = output(&[0.9, 0.1], &[(0.0, v), (y1 - (6.0 * v).sqrt(), v)]);
        let lp = component_log_densities(&three, y1).unwrap();
        assert!((lp[1] - -3.0).abs() < 1e-13);
        assert!((impartial_loss(&[three], &[y1]).unwrap() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn posterior_examples() {
        let eq = output(&[0.25; 4], &[(0.0, 1.0); 4]);
        assert_eq!(posterior_weights(&eq, 0.7).unwrap(), vec![0.25; 4]);
        // densities 0.3 and 0.1 at y = 0 through σ² = 1/(2π p²)
        let var = |p: f64| 1.0 / (2.0 * std::f64::consts::PI * p * p);
        let o = output(&[0.5, 0.5], &[(0.0, var(0.3)), (0.0, var(0.1))]);
        let pi = posterior_weights(&o, 0.0).unwrap();
        assert!((pi[0] - 0.75).abs() < 1e-14 && (pi[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn posterior_underflow_is_an_error() {
        let o = output(&[0.5, 0.5], &[(0.0, 1e-8), (0.0, 1e-8)]);
        assert!(matches!(posterior_weights(&o, 1e200), Err(TrainError::DensityUnderflow)));
    }

    #[test]
    fn errors_name_the_instance() {
        let mut o = output(&[1.0], &[(0.0, 1.0)]);
        o.kind = DistKind::LogNormal;
        let outs = vec![o.clone(), o];
        assert!(matches!(mixture_nll(&outs, &[1.0, -1.0]), Err(TrainError::NonPositiveTarget { instance: 1, .. })));
        let bad = output(&[1.0], &[(f64::NAN, 1.0)]);
        assert!(matches!(mixture_nll(&[bad], &[0.0]), Err(TrainError::NonFinite { instance: 0, .. })));
    }
}
