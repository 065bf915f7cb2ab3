use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{impartial_loss_graph, mixture_nll, mixture_nll_graph};
use super::optim::{clip_global_norm, Optimizer, OptimizerKind};
use super::{Result, TrainError};
use crate::dataio::{WindowedInstance, WindowedSplits};
use crate::distributions::{DistKind, DistParams};
use crate::grad::{Tape, Tensor};
use crate::model::{forward_graph, log_density_graph, Batch, MixtureOutput, Model, ModelConfig, ModelParams, ParamVars, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Equal-weighted per-source loss; weight module frozen.
    Impartial,
    /// Full mixture loss over all parameters.
    Collective,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Impartial => "impartial",
            Phase::Collective => "collective",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasedSchedule {
    pub impartial_epochs: usize,
    pub total_epochs: usize,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Step size is multiplied by `lr_decay` every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for PhasedSchedule {
    fn default() -> Self {
        Self {
            impartial_epochs: 10,
            total_epochs: 60,
            step_size: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 64,
            lr_decay: 0.85,
            decay_every: 10,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl PhasedSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Schedule(m.to_string()));
        if self.total_epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("total_epochs, batch_size and decay_every must be positive");
        }
        if self.impartial_epochs > self.total_epochs {
            return bad("impartial_epochs cannot exceed total_epochs");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("step_size must be positive and lr_decay in (0, 1]");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.impartial_epochs {
            Phase::Impartial
        } else {
            Phase::Collective
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.step_size * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Per-epoch training-set diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainDiagnostics {
    pub phases: Vec<Phase>,
    /// Training mixture NLL per epoch, averaged over the epoch's
    /// mini-batches as each was evaluated before its update.
    pub loss: Vec<f64>,
    /// epochs × S, accumulated like `loss`.
    pub source_rmse: Vec<Vec<f64>>,
    /// epochs × S mean posterior weights, accumulated like `loss`.
    pub mean_posterior: Vec<Vec<f64>>,
    /// Validation mixture NLL after each epoch.
    pub val_nll: Vec<f64>,
    /// First collective epoch.
    pub phase_boundary: usize,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainDiagnostics {
    pub fn n_sources(&self) -> usize {
        self.source_rmse.first().map_or(0, |r| r.len())
    }

    pub fn to_csv(&self) -> String {
        let s = self.n_sources();
        let mut out = String::from("epoch,phase,loss,val_nll");
        for k in 0..s {
            out.push_str(&format!(",rmse_src_{}", k));
        }
        for k in 0..s {
            out.push_str(&format!(",pi_src_{}", k));
        }
        out.push('\n');
        for e in 0..self.loss.len() {
            out.push_str(&format!("{},{},{},{}", e, self.phases[e], self.loss[e], self.val_nll[e]));
            for v in self.source_rmse[e].iter().chain(&self.mean_posterior[e]) {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Running training-set statistics over an epoch's mini-batches.
struct EpochAccumulator {
    n: usize,
    nll: f64,
    sq_err: Vec<f64>,
    pi: Vec<f64>,
}

impl EpochAccumulator {
    fn new(s: usize) -> Self {
        Self { n: 0, nll: 0.0, sq_err: vec![0.0; s], pi: vec![0.0; s] }
    }

    fn finish(&self) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        (self.nll / n, self.sq_err.iter().map(|v| (v / n).sqrt()).collect(), self.pi.iter().map(|v| v / n).collect())
    }
}

fn batch_step(model: &Model, instances: &[&WindowedInstance], phase: Phase, acc: Option<&mut EpochAccumulator>) -> Result<(f64, Vec<Tensor>)> {
    if instances.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let batch = Batch::from_instances(&model.config, instances)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, true);
    let g = forward_graph(&mut tape, &model.config, &vars, &batch)?;
    let log_dens = log_density_graph(&mut tape, model.config.dist, &g, &batch.targets)?;
    let loss = match phase {
        Phase::Impartial => impartial_loss_graph(&mut tape, log_dens)?,
        Phase::Collective => mixture_nll_graph(&mut tape, g.log_weights, log_dens)?,
    };
    if let Some(acc) = acc {
        let s_count = model.config.n_sources();
        let (lw, ld) = (tape.value(g.log_weights), tape.value(log_dens));
        for (b, &y) in batch.targets.iter().enumerate() {
            let joint: Vec<f64> = (0..s_count).map(|k| lw.get(b, k) + ld.get(b, k)).collect();
            let lse = crate::grad::log_sum_exp(&joint);
            if !lse.is_finite() {
                return Err(TrainError::DensityUnderflow);
            }
            acc.nll -= lse;
            for k in 0..s_count {
                acc.pi[k] += (joint[k] - lse).exp();
                let p = DistParams::new(tape.value(g.mu[k]).get(b, 0), tape.value(g.sigma2[k]).get(b, 0));
                acc.sq_err[k] += (y - model.config.dist.mean(&p)).powi(2);
            }
        }
        acc.n += batch.targets.len();
    }
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = vars.flat.iter().map(|v| grads.get_or_zeros(*v, tape.shape(*v))).collect();
    Ok((value, out))
}

/// Loss and gradients (canonical parameter order) for one mini-batch.
pub fn batch_gradients(model: &Model, instances: &[&WindowedInstance], phase: Phase) -> Result<(f64, Vec<Tensor>)> {
    batch_step(model, instances, phase, None)
}

/// RMSE between targets and each source's own predictive mean.
pub fn source_wise_rmse(outputs: &[MixtureOutput], targets: &[f64]) -> Vec<f64> {
    let s = outputs.first().map_or(0, |o| o.n_sources());
    (0..s)
        .map(|k| {
            let se: f64 = outputs.iter().zip(targets).map(|(o, y)| (y - o.kind.mean(&o.dist_params[k])).powi(2)).sum();
            (se / outputs.len() as f64).sqrt()
        })
        .collect()
}

fn check_data(cfg: &ModelConfig, data: &WindowedSplits) -> Result<()> {
    if cfg.input_dims != data.input_dims {
        return Err(TrainError::Mismatch(format!("model input dims {:?}, data {:?}", cfg.input_dims, data.input_dims)));
    }
    if data.train.is_empty() {
        return Err(TrainError::Mismatch("training split is empty".into()));
    }
    if cfg.dist == DistKind::LogNormal {
        for (i, inst) in data.train.iter().chain(&data.val).chain(&data.test).enumerate() {
            if !(inst.target > 0.0) {
                return Err(TrainError::NonPositiveTarget { instance: i, value: inst.target });
            }
        }
    }
    Ok(())
}

fn validation_nll(model: &Model, instances: &[WindowedInstance]) -> Result<f64> {
    let outputs = model.forward_batch(instances)?;
    let targets: Vec<f64> = instances.iter().map(|i| i.target).collect();
    mixture_nll(&outputs, &targets)
}

/// Phased training: impartial epochs update encoders and heads only, then
/// collective epochs update everything on the mixture loss. Returns the
/// collective-phase epoch with the lowest validation NLL.
pub fn train(data: &WindowedSplits, cfg: &ModelConfig, schedule: &PhasedSchedule) -> Result<(Model, TrainDiagnostics)> {
    cfg.validate()?;
    schedule.validate()?;
    check_data(cfg, data)?;
    let mut model = Model::new(cfg.clone())?;
    let layout = ModelParams::layout(cfg);
    let mut optimizer = Optimizer::new(schedule.optimizer, layout.len());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut diag = TrainDiagnostics {
        phases: Vec::new(),
        loss: Vec::new(),
        source_rmse: Vec::new(),
        mean_posterior: Vec::new(),
        val_nll: Vec::new(),
        phase_boundary: schedule.impartial_epochs,
        best_epoch: 0,
    };
    let mut best: Option<(f64, Model)> = None;
    let mut last_finite = model.clone();
    for epoch in 0..schedule.total_epochs {
        let phase = schedule.phase(epoch);
        let active: Vec<bool> = layout.iter().map(|s| phase == Phase::Collective || s.role != Role::Theta).collect();
        let lr = schedule.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new(cfg.n_sources());
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&WindowedInstance> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, mut grads) = match batch_step(&model, &batch, phase, Some(&mut acc)) {
                Err(TrainError::DensityUnderflow) => return Err(TrainError::Diverged { epoch, last_finite: Box::new(last_finite) }),
                r => r?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::Diverged { epoch, last_finite: Box::new(last_finite) });
            }
            if let Some(c) = schedule.grad_clip {
                clip_global_norm(&mut grads, &active, c);
            }
            let mut params = model.params.tensors_mut();
            optimizer.step(&mut params, &grads, &active, lr);
        }
        if !model.params.is_finite() {
            return Err(TrainError::Diverged { epoch, last_finite: Box::new(last_finite) });
        }
        let (train_nll, rmse, mean_pi) = acc.finish();
        let val = if data.val.is_empty() { train_nll } else { validation_nll(&model, &data.val).unwrap_or(f64::INFINITY) };
        diag.phases.push(phase);
        diag.loss.push(train_nll);
        diag.source_rmse.push(rmse);
        diag.mean_posterior.push(mean_pi);
        diag.val_nll.push(val);
        last_finite = model.clone();

        // impartial epochs only compete when no collective epoch exists
        let eligible = phase == Phase::Collective || schedule.impartial_epochs == schedule.total_epochs;
        if eligible && best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, model.clone()));
            diag.best_epoch = epoch;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, diag))
}
