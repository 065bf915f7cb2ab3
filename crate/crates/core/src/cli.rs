//! Batch command-line front end. Settings resolve as flags over a JSON
//! config file over defaults, and the effective settings are written next
//! to every output directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataio::{
    featurize_markets, read_bundle, read_lob_csv, read_trades_csv, synth_generate, window_and_split, write_bundle, write_ground_truth, DataError, LobConfig,
    MarketInput, Split, SplitFractions, SynthConfig, WindowSpec, WindowedSplits, SECONDS_PER_DAY,
};
use crate::distributions::DistKind;
use crate::grad::GradError;
use crate::inference::{InferenceError, PredictionRecord};
use crate::metrics::{self, MetricError};
use crate::model::{MixtureOutput, Model, ModelConfig, ModelError};
use crate::study::{self, StudyConfig, StudyError};
use crate::training::{mixture_gradient_error, random_instance, train, verify_posterior_gradients, verify_impartial_bound, OptimizerKind, PhasedSchedule, TrainError};

/// Default for data and output directories when no path is given.
pub const DATA_DIR_ENV: &str = "MSMIX_DATA_DIR";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Grad(g) => g.into(),
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Schedule(_) => CliError::Config(e.to_string()),
            TrainError::Mismatch(_) | TrainError::NonPositiveTarget { .. } | TrainError::EmptyBatch => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Train(t) => t.into(),
            MetricError::Inference(i) => i.into(),
            MetricError::Bins(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Data(d) => d.into(),
            StudyError::Model(m) => m.into(),
            StudyError::Train(t) => t.into(),
            StudyError::Metric(m) => m.into(),
            StudyError::Inference(i) => i.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msmix", version, about = "Mixture forecasting over multi-source time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a regime-switching synthetic bundle with ground truth.
    Synth(SynthArgs),
    /// Build a bundle from per-market trade and order-book CSVs.
    Featurize(FeaturizeArgs),
    /// Train a model on a bundle; writes a checkpoint and diagnostics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Export per-instance forecasts as JSON lines.
    Predict(PredictArgs),
    /// Check gradients, the posterior-weighted gradient identity and the
    /// impartial loss bound on random models.
    Verify(VerifyArgs),
    /// Run the phased-vs-direct synthetic study and write plot-ready CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Normal,
    Lognormal,
}

impl From<DistArg> for DistKind {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Normal => DistKind::Normal,
            DistArg::Lognormal => DistKind::LogNormal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dist: Option<DistArg>,
    /// Seconds per step.
    #[arg(long)]
    pub interval: Option<i64>,
    #[arg(long)]
    pub stay_prob: Option<f64>,
    /// Output bundle directory [default: $MSMIX_DATA_DIR or ./data].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeSettings {
    pub interval_seconds: i64,
    pub deseasonalize: bool,
    /// Defaults to one slot per interval of the day.
    pub slots_per_day: Option<usize>,
    /// Index of the market whose traded volume is the target.
    pub target_market: usize,
    pub lob: LobConfig,
    pub splits: SplitFractions,
}

impl Default for FeaturizeSettings {
    fn default() -> Self {
        Self { interval_seconds: 300, deseasonalize: false, slots_per_day: None, target_market: 0, lob: LobConfig::default(), splits: SplitFractions::default() }
    }
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Trades CSV per market (`timestamp,price,size,side`); repeat per market.
    #[arg(long, required = true)]
    pub trades: Vec<PathBuf>,
    /// Order-book CSV per market (`timestamp,level,side,price,size`), in the
    /// same order as `--trades`.
    #[arg(long, required = true)]
    pub lob: Vec<PathBuf>,
    /// Market names, in the same order [default: market0, market1, ...].
    #[arg(long)]
    pub market: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub interval: Option<i64>,
    /// Remove the intraday mean profile (fitted on training rows) from the target.
    #[arg(long)]
    pub deseasonalize: bool,
    #[arg(long)]
    pub slots_per_day: Option<usize>,
    #[arg(long)]
    pub target_market: Option<usize>,
    #[arg(long)]
    pub tick: Option<f64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden: usize,
    pub layers: usize,
    pub head_hidden: Vec<usize>,
    /// Width of the weight module's hidden layer; defaults to `hidden`.
    pub gate_hidden: Option<usize>,
    pub dist: DistKind,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { hidden: 16, layers: 1, head_hidden: Vec::new(), gate_hidden: None, dist: DistKind::Normal, seed: 0 }
    }
}

impl ModelSettings {
    pub fn model_config(&self, input_dims: Vec<usize>, lookback: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(input_dims, lookback, self.hidden, self.dist, self.seed);
        cfg.layers = self.layers;
        cfg.head_hidden = self.head_hidden.clone();
        cfg.gate_hidden = self.gate_hidden.unwrap_or(self.hidden);
        cfg
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelSettings,
    pub schedule: PhasedSchedule,
    pub window: WindowSpec,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bundle directory [default: $MSMIX_DATA_DIR or ./data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON with optional `model`, `schedule` and `window` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum)]
    pub dist: Option<DistArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub impartial_epochs: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Seeds both initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub standardize_target: bool,
    /// Output directory for checkpoint.json and diagnostics.csv.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
    pub bins: usize,
    /// Report file [default: stdout].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// JSON-lines file [default: stdout].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random draws for the identity check; the bound check uses ten times as many.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON study settings (`synth`, `window`, `hidden`, `schedule`, `seeds`, `bins`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, counted from 0.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub impartial_epochs: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Featurize(a) => cmd_featurize(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn data_dir(explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {}", parent.display(), e)))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))
}

fn echo_config<T: Serialize>(dir: &Path, settings: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(settings).expect("settings serialize");
    write_file(&dir.join(EFFECTIVE_CONFIG), &(text + "\n"))
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Data(e.to_string())),
    }
}

fn override_with<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(a.config.as_ref())?;
    override_with(&mut cfg.n_sources, a.sources);
    override_with(&mut cfg.length, a.length);
    override_with(&mut cfg.seed, a.seed);
    override_with(&mut cfg.dist, a.dist.map(Into::into));
    override_with(&mut cfg.interval_seconds, a.interval);
    override_with(&mut cfg.stay_prob, a.stay_prob);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (ds, truth) = synth_generate(&cfg)?;
    let dir = data_dir(a.out.as_ref());
    write_bundle(&dir, &ds, Some(&cfg))?;
    write_ground_truth(&dir, &ds.timestamps, &truth)?;
    echo_config(&dir, &cfg)?;
    eprintln!("wrote {} sources × {} steps to {}", ds.sources.len(), ds.len(), dir.display());
    Ok(())
}

pub fn cmd_featurize(a: &FeaturizeArgs) -> Result<()> {
    let mut s: FeaturizeSettings = load_config(a.config.as_ref())?;
    override_with(&mut s.interval_seconds, a.interval);
    s.deseasonalize |= a.deseasonalize;
    if a.slots_per_day.is_some() {
        s.slots_per_day = a.slots_per_day;
    }
    override_with(&mut s.target_market, a.target_market);
    override_with(&mut s.lob.tick, a.tick);
    if a.trades.len() != a.lob.len() {
        return Err(CliError::Config(format!("{} trade files but {} order-book files", a.trades.len(), a.lob.len())));
    }
    if !a.market.is_empty() && a.market.len() != a.trades.len() {
        return Err(CliError::Config(format!("{} market names for {} markets", a.market.len(), a.trades.len())));
    }
    if s.interval_seconds <= 0 {
        return Err(CliError::Config(format!("interval must be positive, got {}", s.interval_seconds)));
    }
    let mut markets = Vec::with_capacity(a.trades.len());
    for (k, (t, l)) in a.trades.iter().zip(&a.lob).enumerate() {
        markets.push(MarketInput {
            market_id: a.market.get(k).cloned().unwrap_or_else(|| format!("market{}", k)),
            trades: read_trades_csv(t)?,
            snapshots: read_lob_csv(l)?,
        });
    }
    let mut ds = featurize_markets(&markets, s.interval_seconds, &s.lob, s.target_market, s.splits)?;
    if s.deseasonalize {
        let slots = s.slots_per_day.unwrap_or((SECONDS_PER_DAY / s.interval_seconds).max(1) as usize);
        s.slots_per_day = Some(slots);
        ds.deseasonalize_target(slots)?;
    }
    let dir = data_dir(a.out.as_ref());
    write_bundle(&dir, &ds, None)?;
    echo_config(&dir, &s)?;
    eprintln!("wrote {} sources (dims {:?}) × {} intervals to {}", ds.sources.len(), ds.input_dims(), ds.len(), dir.display());
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<TrainSettings> {
    let mut s: TrainSettings = load_config(a.config.as_ref())?;
    override_with(&mut s.model.hidden, a.hidden);
    override_with(&mut s.model.layers, a.layers);
    override_with(&mut s.model.dist, a.dist.map(Into::into));
    override_with(&mut s.window.lookback, a.lookback);
    override_with(&mut s.window.horizon, a.horizon);
    s.window.standardize_target |= a.standardize_target;
    override_with(&mut s.schedule.total_epochs, a.epochs);
    override_with(&mut s.schedule.impartial_epochs, a.impartial_epochs);
    override_with(&mut s.schedule.step_size, a.step_size);
    override_with(&mut s.schedule.batch_size, a.batch_size);
    if a.grad_clip.is_some() {
        s.schedule.grad_clip = a.grad_clip;
    }
    match a.optimizer {
        Some(OptimizerArg::Sgd) => s.schedule.optimizer = OptimizerKind::Sgd,
        Some(OptimizerArg::Adam) if !matches!(s.schedule.optimizer, OptimizerKind::Adam { .. }) => s.schedule.optimizer = OptimizerKind::adam(),
        _ => {}
    }
    if let Some(seed) = a.seed {
        s.model.seed = seed;
        s.schedule.seed = seed;
    }
    s.schedule.validate()?;
    if s.window.standardize_target && s.model.dist == DistKind::LogNormal {
        return Err(CliError::Config("target standardization applies to normal targets only".into()));
    }
    Ok(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let s = resolve_train(a)?;
    let (ds, _) = read_bundle(&data_dir(a.data.as_ref()))?;
    let cfg = s.model.model_config(ds.input_dims(), s.window.lookback);
    cfg.validate()?;
    if cfg.dist == DistKind::LogNormal {
        if let Some(row) = ds.target.iter().position(|y| !(*y > 0.0)) {
            return Err(CliError::Data(format!("log-normal targets must be positive; row {} has {}", row, ds.target[row])));
        }
    }
    let data = window_and_split(&ds, &s.window)?;
    let (model, diag) = train(&data, &cfg, &s.schedule)?;
    write_file(&a.out.join("checkpoint.json"), &Checkpoint::from_model(&model, Some(&s.window)).to_json())?;
    write_file(&a.out.join("diagnostics.csv"), &diag.to_csv())?;
    echo_config(&a.out, &s)?;
    eprintln!(
        "trained {} epochs ({} impartial); kept epoch {} with validation NLL {:.6}",
        s.schedule.total_epochs, s.schedule.impartial_epochs, diag.best_epoch, diag.val_nll[diag.best_epoch]
    );
    Ok(())
}

/// Model outputs and targets for a split, in the bundle's target units.
fn split_outputs(checkpoint: &Path, data: Option<&PathBuf>, split: Split) -> Result<(Vec<MixtureOutput>, Vec<f64>, Vec<i64>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let window = ck.window.clone().unwrap_or_else(|| WindowSpec::new(model.config.lookback));
    let (ds, _) = read_bundle(&data_dir(data))?;
    let windowed: WindowedSplits = window_and_split(&ds, &window)?;
    if windowed.input_dims != model.config.input_dims {
        return Err(CliError::Data(format!("bundle dims {:?} do not match checkpoint dims {:?}", windowed.input_dims, model.config.input_dims)));
    }
    let instances = windowed.get(split);
    if instances.is_empty() {
        return Err(CliError::Data(format!("split {:?} is empty", split)));
    }
    let mut outputs = model.forward_batch(instances)?;
    let mut targets: Vec<f64> = instances.iter().map(|i| i.target).collect();
    if windowed.standardized_target {
        let st = &windowed.stats;
        outputs = outputs.iter().map(|o| o.affine(st.target_mean, st.target_std)).collect();
        targets.iter_mut().for_each(|y| *y = st.target_to_raw(*y));
    }
    Ok((outputs, targets, instances.iter().map(|i| i.timestamp).collect()))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (outputs, targets, _) = split_outputs(&a.checkpoint, a.data.as_ref(), a.split.into())?;
    let report = metrics::evaluate(&outputs, &targets, a.bins)?;
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        Format::Csv => report.to_csv(),
    };
    emit(a.out.as_ref(), &text)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (outputs, _, timestamps) = split_outputs(&a.checkpoint, a.data.as_ref(), a.split.into())?;
    let mut text = String::new();
    for (o, t) in outputs.iter().zip(timestamps) {
        let rec = PredictionRecord::from_output(t, o)?;
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
    }
    emit(a.out.as_ref(), &text)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let mut failed = false;
    for dist in [DistKind::Normal, DistKind::LogNormal] {
        let cfg = ModelConfig::new(vec![4, 4, 4], 12, 8, dist, a.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let insts: Vec<_> = (0..4).map(|_| random_instance(&cfg, &mut rng)).collect();
        let refs: Vec<_> = insts.iter().collect();
        let err = mixture_gradient_error(&Model::new(cfg)?, &refs, 1e-5)?;
        let ok = err < 1e-4;
        failed |= !ok;
        println!("gradient check ({}): max relative error {:.3e} [{}]", dist, err, if ok { "ok" } else { "FAIL" });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: f64 = 0.0;
    for i in 0..a.draws {
        let dist = if i % 2 == 0 { DistKind::Normal } else { DistKind::LogNormal };
        let dims: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(1..5)).collect();
        let cfg = ModelConfig::new(dims, rng.gen_range(1..6), rng.gen_range(1..6), dist, rng.gen());
        let model = Model::new(cfg.clone())?;
        let inst = random_instance(&cfg, &mut rng);
        worst = worst.max(verify_posterior_gradients(&model, &[&inst])?.max_rel);
    }
    let ok = worst < 1e-8;
    failed |= !ok;
    println!("posterior-weighted gradient identity: {} draws, max relative discrepancy {:.3e} [{}]", a.draws, worst, if ok { "ok" } else { "FAIL" });

    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..10 * a.draws {
        let dist = if i % 2 == 0 { DistKind::Normal } else { DistKind::LogNormal };
        let dims: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(1..4)).collect();
        let cfg = ModelConfig::new(dims, rng.gen_range(1..5), rng.gen_range(1..5), dist, rng.gen());
        let r = verify_impartial_bound(&Model::new(cfg.clone())?, &random_instance(&cfg, &mut rng))?;
        max_excess = max_excess.max(r.loss - r.bound);
        if !r.holds() {
            violations += 1;
        }
    }
    failed |= violations > 0;
    println!(
        "impartial upper bound: {} draws, {} violations, max loss − bound {:.3e} [{}]",
        10 * a.draws,
        violations,
        max_excess,
        if violations == 0 { "ok" } else { "FAIL" }
    );
    if failed {
        return Err(CliError::Numeric("verification failed".into()));
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut cfg: StudyConfig = load_config(a.config.as_ref())?;
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n).collect();
    }
    override_with(&mut cfg.synth.length, a.length);
    override_with(&mut cfg.schedule.total_epochs, a.epochs);
    override_with(&mut cfg.schedule.impartial_epochs, a.impartial_epochs);
    cfg.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.schedule.validate()?;
    let results = study::run_study(&cfg)?;
    let mut summary = String::from("seed,arm,test_rmse,spread,regime_accuracy,oracle_accuracy,spearman\n");
    for r in &results {
        for (name, arm) in [("phased", &r.phased), ("direct", &r.direct)] {
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                name,
                arm.test_rmse,
                arm.spread,
                arm.regime_accuracy,
                r.oracle_accuracy,
                arm.spearman.map_or(String::new(), |v| v.to_string())
            ));
            if let Some(d) = &arm.diagnostics {
                write_file(&a.out.join(format!("curves_seed{}_{}.csv", r.seed, name)), &d.to_csv())?;
            }
            let mut bins = String::from("bin,lo,hi,count,rmse\n");
            for b in &arm.unc_bins {
                bins.push_str(&format!("{},{},{},{},{}\n", b.index, b.lo, b.hi, b.count, b.rmse.map_or(String::new(), |v| v.to_string())));
            }
            write_file(&a.out.join(format!("bins_seed{}_{}.csv", r.seed, name)), &bins)?;
        }
    }
    write_file(&a.out.join("summary.csv"), &summary)?;
    write_file(&a.out.join("study.json"), &(serde_json::to_string_pretty(&results).expect("results serialize") + "\n"))?;
    echo_config(&a.out, &cfg)?;
    print!("{}", summary);
    Ok(())
}
