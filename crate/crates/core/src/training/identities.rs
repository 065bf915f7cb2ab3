//! Numerical checks of the posterior-weighted gradient identity and of the
//! impartial upper bound on the mixture loss.

use rand::Rng;

use super::loss::{component_log_densities, impartial_loss, instance_nll, mixture_nll_graph};
use super::trainer::{batch_gradients, Phase};
use super::{Result, TrainError};
use crate::dataio::WindowedInstance;
use crate::distributions::DistKind;
use crate::grad::{check_gradients, Tape, Tensor};
use crate::model::{forward_graph, log_density_graph, Batch, Model, ModelConfig, ModelParams, ParamVars, Role};

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGradientReport {
    /// Largest relative deviation over all parameter blocks.
    pub max_rel: f64,
    pub eta: f64,
    pub omega: f64,
    pub theta: f64,
}

fn rel_discrepancy(a: &Tensor, b: &Tensor) -> f64 {
    let inf = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = inf(a).max(inf(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares autodiff gradients of the mixture loss with the closed form
/// `∇ω_s = π_s g_ω_s` and `∇η_s = π_s g_η_s + d_η_s`, where `g` is the
/// gradient of `−log p_s` and `d` the gradient of `−Σ_k π_k log w_k` with
/// `π` held fixed. Both sides are averaged over `instances`.
pub fn verify_posterior_gradients(model: &Model, instances: &[&WindowedInstance]) -> Result<PosteriorGradientReport> {
    if instances.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (_, direct) = batch_gradients(model, instances, Phase::Collective)?;
    let layout = ModelParams::layout(&model.config);
    let mut closed: Vec<Tensor> = layout.iter().map(|s| Tensor::zeros(s.shape[0], s.shape[1])).collect();
    let s_count = model.config.n_sources();
    for inst in instances {
        let batch = Batch::from_instances(&model.config, &[*inst])?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &model.params, true);
        let g = forward_graph(&mut tape, &model.config, &vars, &batch)?;
        let log_dens = log_density_graph(&mut tape, model.config.dist, &g, &batch.targets)?;

        let lw = tape.value(g.log_weights).data().to_vec();
        let ld = tape.value(log_dens).data().to_vec();
        let joint: Vec<f64> = lw.iter().zip(&ld).map(|(a, b)| a + b).collect();
        let lse = crate::grad::log_sum_exp(&joint);
        let pi: Vec<f64> = joint.iter().map(|v| (v - lse).exp()).collect();

        let nll_sum = tape.sum(log_dens);
        let g_root = tape.neg(nll_sum);
        let pi_const = tape.constant(Tensor::row(pi.clone()));
        let weighted = tape.mul(pi_const, g.log_weights)?;
        let d_sum = tape.sum(weighted);
        let d_root = tape.neg(d_sum);

        let g_grads = tape.backward(g_root)?;
        let d_grads = tape.backward(d_root)?;
        for (k, (slot, v)) in layout.iter().zip(&vars.flat).enumerate() {
            let shape = tape.shape(*v);
            let gk = g_grads.get_or_zeros(*v, shape);
            let dk = d_grads.get_or_zeros(*v, shape);
            let p = pi[slot.source];
            let acc = closed[k].data_mut();
            match slot.role {
                Role::Omega => acc.iter_mut().zip(gk.data()).for_each(|(a, x)| *a += p * x),
                Role::Eta => acc.iter_mut().zip(gk.data().iter().zip(dk.data())).for_each(|(a, (x, y))| *a += p * x + y),
                Role::Theta => acc.iter_mut().zip(dk.data()).for_each(|(a, y)| *a += y),
            }
        }
        debug_assert_eq!(pi.len(), s_count);
    }
    let n = instances.len() as f64;
    closed.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= n));

    let mut report = PosteriorGradientReport { max_rel: 0.0, eta: 0.0, omega: 0.0, theta: 0.0 };
    for (slot, (a, b)) in layout.iter().zip(direct.iter().zip(&closed)) {
        let r = rel_discrepancy(a, b);
        let field = match slot.role {
            Role::Eta => &mut report.eta,
            Role::Omega => &mut report.omega,
            Role::Theta => &mut report.theta,
        };
        *field = field.max(r);
        report.max_rel = report.max_rel.max(r);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImpartialBoundReport {
    pub loss: f64,
    pub bound: f64,
    /// Smallest mixture weight.
    pub a_star: f64,
}

impl ImpartialBoundReport {
    pub fn holds(&self) -> bool {
        self.loss <= self.bound + 1e-9
    }
}

/// Single-instance mixture loss against `−(1/S) Σ_s log p_s − log(S·a*)`.
pub fn verify_impartial_bound(model: &Model, instance: &WindowedInstance) -> Result<ImpartialBoundReport> {
    let out = model.forward(instance)?;
    let y = instance.target;
    component_log_densities(&out, y)?;
    let loss = instance_nll(&out, y)?;
    let imp = impartial_loss(std::slice::from_ref(&out), &[y])?;
    let a_star = out.weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let bound = imp - (out.n_sources() as f64 * a_star).ln();
    Ok(ImpartialBoundReport { loss, bound, a_star })
}

/// Instance with inputs uniform on `[-2, 2)` and a target in the support of
/// `cfg.dist`.
pub fn random_instance<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> WindowedInstance {
    WindowedInstance {
        windows: cfg
            .input_dims
            .iter()
            .map(|&d| Tensor::new(cfg.lookback, d, (0..cfg.lookback * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("window shape"))
            .collect(),
        target: match cfg.dist {
            DistKind::Normal => rng.gen_range(-2.0..2.0),
            DistKind::LogNormal => rng.gen_range(0.1..3.0),
        },
        timestamp: 0,
        row: 0,
    }
}

/// Maximum relative error between autodiff and central-difference
/// gradients of the mixture loss of `model` on `instances`.
pub fn mixture_gradient_error(model: &Model, instances: &[&WindowedInstance], step: f64) -> Result<f64> {
    let cfg = &model.config;
    let batch = Batch::from_instances(cfg, instances)?;
    let params: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
    let err = check_gradients(
        |tape, vars| {
            let pv = ParamVars::from_vars(&model.params, vars);
            let g = forward_graph(tape, cfg, &pv, &batch)?;
            let ld = log_density_graph(tape, cfg.dist, &g, &batch.targets)?;
            mixture_nll_graph(tape, g.log_weights, ld)
        },
        &params,
        step,
    )?;
    Ok(err)
}
