//! Paired phased-vs-direct experiment on regime-switching synthetic data.

use serde::{Deserialize, Serialize};

use crate::dataio::{bayes_regime_filter, synth_generate, window_and_split, DataError, SynthConfig, WindowSpec, WindowedSplits};
use crate::inference;
use crate::metrics::{self, MetricError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::training::{train, PhasedSchedule, TrainDiagnostics, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub synth: SynthConfig,
    pub window: WindowSpec,
    pub hidden: usize,
    /// Schedule of the phased arm; the direct arm sets `impartial_epochs = 0`.
    pub schedule: PhasedSchedule,
    pub seeds: Vec<u64>,
    pub bins: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::new(3, 20_000, crate::DistKind::Normal, 0),
            window: WindowSpec::new(8),
            hidden: 8,
            schedule: PhasedSchedule { step_size: 1e-4, ..PhasedSchedule::default() },
            seeds: vec![0, 1, 2, 3, 4],
            bins: metrics::DEFAULT_BINS,
        }
    }
}

/// Outcome of one trained model on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub impartial_epochs: usize,
    pub test_rmse: f64,
    /// Per-source training RMSE at the final epoch.
    pub final_source_rmse: Vec<f64>,
    /// `max − min` of `final_source_rmse`.
    pub spread: f64,
    /// Share of test rows where the heaviest weight names the true regime.
    pub regime_accuracy: f64,
    pub spearman: Option<f64>,
    pub unc_bins: Vec<metrics::UncBin>,
    #[serde(skip)]
    pub diagnostics: Option<TrainDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Regime accuracy of the HMM filter on the same test rows.
    pub oracle_accuracy: f64,
    pub phased: ArmResult,
    pub direct: ArmResult,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Generates the seed's dataset and its windowed splits.
pub fn prepare(cfg: &StudyConfig, seed: u64) -> Result<(WindowedSplits, Vec<usize>, Vec<usize>), StudyError> {
    let synth = SynthConfig { seed, ..cfg.synth.clone() };
    let (ds, truth) = synth_generate(&synth)?;
    let oracle = bayes_regime_filter(&ds, &synth, cfg.window.horizon);
    let data = window_and_split(&ds, &cfg.window)?;
    Ok((data, truth.regime, oracle))
}

/// Trains and scores one arm on prepared data.
pub fn run_arm(cfg: &StudyConfig, seed: u64, data: &WindowedSplits, regime: &[usize], impartial_epochs: usize) -> Result<ArmResult, StudyError> {
    let model_cfg = ModelConfig::new(data.input_dims.clone(), cfg.window.lookback, cfg.hidden, cfg.synth.dist, seed);
    let schedule = PhasedSchedule { impartial_epochs, seed, ..cfg.schedule.clone() };
    let (model, diag) = train(data, &model_cfg, &schedule)?;
    score(cfg, &model, data, regime, impartial_epochs, diag)
}

fn score(cfg: &StudyConfig, model: &Model, data: &WindowedSplits, regime: &[usize], impartial_epochs: usize, diag: TrainDiagnostics) -> Result<ArmResult, StudyError> {
    let outputs = model.forward_batch(&data.test)?;
    let y: Vec<f64> = data.test.iter().map(|i| i.target).collect();
    let mut means = Vec::with_capacity(y.len());
    let mut totals = Vec::with_capacity(y.len());
    let mut hits = 0usize;
    for (o, inst) in outputs.iter().zip(&data.test) {
        means.push(inference::predictive_mean(o));
        totals.push(inference::predictive_uncertainty(o)?.2);
        if crate::dataio::argmax(&o.weights) == regime[inst.row] {
            hits += 1;
        }
    }
    let unc = metrics::uncertainty_conditioned_errors(&y, &means, &totals, cfg.bins)?;
    let final_source_rmse = diag.source_rmse.last().cloned().unwrap_or_default();
    let hi = final_source_rmse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = final_source_rmse.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ArmResult {
        impartial_epochs,
        test_rmse: metrics::rmse(&y, &means)?,
        spread: hi - lo,
        final_source_rmse,
        regime_accuracy: hits as f64 / y.len() as f64,
        spearman: unc.spearman,
        unc_bins: unc.bins,
        diagnostics: Some(diag),
    })
}

/// Oracle regime accuracy on the test rows.
pub fn oracle_accuracy(data: &WindowedSplits, regime: &[usize], oracle: &[usize]) -> f64 {
    let hits = data.test.iter().filter(|i| oracle[i.row] == regime[i.row]).count();
    hits as f64 / data.test.len() as f64
}

/// Both arms for every configured seed.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<SeedResult>, StudyError> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let (data, regime, oracle) = prepare(cfg, seed)?;
            Ok(SeedResult {
                seed,
                oracle_accuracy: oracle_accuracy(&data, &regime, &oracle),
                phased: run_arm(cfg, seed, &data, &regime, cfg.schedule.impartial_epochs)?,
                direct: run_arm(cfg, seed, &data, &regime, 0)?,
            })
        })
        .collect()
}
