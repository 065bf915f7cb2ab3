//! Per-source LSTM encoders, distribution heads and the softmax weight module.
//!
//! Source `s` owns three parameter groups: the encoder (`eta`), the head
//! (`omega`) and the weight-logit perceptron (`theta`). No parameters are
//! shared across sources; the only cross-source coupling is the softmax over
//! the per-source logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::WindowedInstance;
use crate::distributions::{DistKind, DistParams, LOG_NORM_CONST};
use crate::grad::{GradError, Result as GradResult, Tape, Tensor, Var};

/// Floor added to every predicted variance.
pub const SIGMA2_MIN: f64 = 1e-8;

/// Largest batch evaluated on one tape during inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("source {source_index}: window is {rows}x{cols}, expected {lookback}x{dim}")]
    WindowShape {
        source_index: usize,
        rows: usize,
        cols: usize,
        lookback: usize,
        dim: usize,
    },
    #[error("instance has {got} source windows, model expects {expected}")]
    SourceCount { got: usize, expected: usize },
    #[error("parameter list does not match the model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_layers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension `d_s` of every source; its length is `S`.
    pub input_dims: Vec<usize>,
    pub lookback: usize,
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Hidden layer widths of each distribution head (tanh).
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    /// Hidden width of each weight-logit perceptron (tanh); 0 means linear.
    pub gate_hidden: usize,
    pub dist: DistKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dims: Vec<usize>, lookback: usize, hidden: usize, dist: DistKind, seed: u64) -> Self {
        Self {
            input_dims,
            lookback,
            hidden,
            layers: 1,
            head_hidden: Vec::new(),
            gate_hidden: hidden,
            dist,
            seed,
        }
    }

    pub fn n_sources(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input_dims.is_empty() {
            return bad("at least one source is required");
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return bad("every source needs at least one feature");
        }
        if self.lookback == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("lookback, hidden and layers must be positive");
        }
        if self.head_hidden.iter().any(|&h| h == 0) {
            return bad("head hidden sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// in × out
    pub weight: Tensor,
    /// 1 × out
    pub bias: Tensor,
}

/// One LSTM layer; gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// d × 4H
    pub w_input: Tensor,
    /// H × 4H
    pub w_hidden: Tensor,
    /// 1 × 4H
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceParams {
    pub encoder: Vec<LstmLayer>,
    pub head: Vec<Dense>,
    pub gate: Vec<Dense>,
}

/// Trainable parameter group of a source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Representation (encoder) parameters.
    Eta,
    /// Prediction-head parameters.
    Omega,
    /// Weight-logit parameters.
    Theta,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub source: usize,
    pub role: Role,
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub sources: Vec<SourceParams>,
}

struct Shapes {
    encoder: Vec<[[usize; 2]; 3]>,
    head: Vec<[[usize; 2]; 2]>,
    gate: Vec<[[usize; 2]; 2]>,
}

fn source_shapes(cfg: &ModelConfig, s: usize) -> Shapes {
    let h = cfg.hidden;
    let encoder = (0..cfg.layers)
        .map(|l| {
            let d = if l == 0 { cfg.input_dims[s] } else { h };
            [[d, 4 * h], [h, 4 * h], [1, 4 * h]]
        })
        .collect();
    let dense_chain = |widths: &[usize], out: usize| {
        let mut prev = h;
        let mut v = Vec::new();
        for &w in widths.iter().chain(std::iter::once(&out)) {
            v.push([[prev, w], [1, w]]);
            prev = w;
        }
        v
    };
    let gate_widths: Vec<usize> = if cfg.gate_hidden > 0 { vec![cfg.gate_hidden] } else { Vec::new() };
    Shapes {
        encoder,
        head: dense_chain(&cfg.head_hidden, 2),
        gate: dense_chain(&gate_widths, 1),
    }
}

impl ModelParams {
    /// Seeded uniform(−a, a) initialization with `a = 1/√fan_in`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform = |shape: [usize; 2], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(shape[0], shape[1], data).expect("shape matches data")
        };
        let sources = (0..cfg.n_sources())
            .map(|s| {
                let sh = source_shapes(cfg, s);
                let encoder = sh
                    .encoder
                    .iter()
                    .map(|[wi, wh, b]| {
                        let fan_in = wi[0] + wh[0];
                        LstmLayer {
                            w_input: uniform(*wi, fan_in),
                            w_hidden: uniform(*wh, fan_in),
                            bias: uniform(*b, fan_in),
                        }
                    })
                    .collect();
                let mut dense = |shapes: &[[[usize; 2]; 2]]| -> Vec<Dense> {
                    shapes
                        .iter()
                        .map(|[w, b]| Dense { weight: uniform(*w, w[0]), bias: uniform(*b, w[0]) })
                        .collect()
                };
                let head = dense(&sh.head);
                let gate = dense(&sh.gate);
                SourceParams { encoder, head, gate }
            })
            .collect();
        Ok(Self { sources })
    }

    /// All-zero parameters with the layout of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Self::layout(cfg);
        Self::from_tensors(cfg, layout.iter().map(|s| Tensor::zeros(s.shape[0], s.shape[1])).collect())
    }

    /// Canonical parameter order: per source, encoder then head then gate.
    pub fn layout(cfg: &ModelConfig) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for s in 0..cfg.n_sources() {
            let sh = source_shapes(cfg, s);
            for (l, shapes) in sh.encoder.iter().enumerate() {
                for (name, shape) in ["w_input", "w_hidden", "bias"].iter().zip(shapes) {
                    slots.push(ParamSlot {
                        source: s,
                        role: Role::Eta,
                        name: format!("src{}.eta.lstm{}.{}", s, l, name),
                        shape: *shape,
                    });
                }
            }
            for (role, tag, layers) in [(Role::Omega, "omega.dense", &sh.head), (Role::Theta, "theta.dense", &sh.gate)] {
                for (l, shapes) in layers.iter().enumerate() {
                    for (name, shape) in ["weight", "bias"].iter().zip(shapes) {
                        slots.push(ParamSlot {
                            source: s,
                            role,
                            name: format!("src{}.{}{}.{}", s, tag, l, name),
                            shape: *shape,
                        });
                    }
                }
            }
        }
        slots
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for sp in &self.sources {
            for l in &sp.encoder {
                out.extend([&l.w_input, &l.w_hidden, &l.bias]);
            }
            for d in sp.head.iter().chain(&sp.gate) {
                out.extend([&d.weight, &d.bias]);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for sp in &mut self.sources {
            for l in &mut sp.encoder {
                out.push(&mut l.w_input);
                out.push(&mut l.w_hidden);
                out.push(&mut l.bias);
            }
            for d in sp.head.iter_mut().chain(sp.gate.iter_mut()) {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = Self::layout(cfg);
        if layout.len() != tensors.len() {
            return Err(ModelError::Layout(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for (slot, t) in layout.iter().zip(&tensors) {
            if slot.shape != t.shape() {
                return Err(ModelError::Layout(format!("{} has shape {:?}, expected {:?}", slot.name, t.shape(), slot.shape)));
            }
        }
        let mut it = tensors.into_iter();
        let sources = (0..cfg.n_sources())
            .map(|s| {
                let sh = source_shapes(cfg, s);
                let encoder = sh
                    .encoder
                    .iter()
                    .map(|_| LstmLayer {
                        w_input: it.next().unwrap(),
                        w_hidden: it.next().unwrap(),
                        bias: it.next().unwrap(),
                    })
                    .collect();
                let mut dense = |n: usize| -> Vec<Dense> {
                    (0..n).map(|_| Dense { weight: it.next().unwrap(), bias: it.next().unwrap() }).collect()
                };
                let head = dense(sh.head.len());
                let gate = dense(sh.gate.len());
                SourceParams { encoder, head, gate }
            })
            .collect();
        Ok(Self { sources })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Per-instance model output.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOutput {
    pub kind: DistKind,
    /// Mixture weights `P(z = s | ·)`; sums to one.
    pub weights: Vec<f64>,
    pub dist_params: Vec<DistParams>,
    /// Source representations (last encoder hidden state).
    pub reps: Vec<Vec<f64>>,
}

impl MixtureOutput {
    pub fn n_sources(&self) -> usize {
        self.weights.len()
    }

    /// Maps the output through `y ↦ offset + scale·y`. Only meaningful for
    /// `Normal` components, whose family is closed under affine maps.
    pub fn affine(&self, offset: f64, scale: f64) -> MixtureOutput {
        debug_assert_eq!(self.kind, DistKind::Normal);
        MixtureOutput {
            kind: self.kind,
            weights: self.weights.clone(),
            dist_params: self
                .dist_params
                .iter()
                .map(|p| DistParams::new(offset + scale * p.mu, scale * scale * p.sigma2))
                .collect(),
            reps: self.reps.clone(),
        }
    }
}

/// Tape handles of one source's parameters.
pub struct SourceVars {
    pub encoder: Vec<[Var; 3]>,
    pub head: Vec<[Var; 2]>,
    pub gate: Vec<[Var; 2]>,
}

/// Parameters registered on a tape, mirroring [`ModelParams`].
pub struct ParamVars {
    pub sources: Vec<SourceVars>,
    /// Same handles in canonical order.
    pub flat: Vec<Var>,
}

impl ParamVars {
    /// Registers `params` as differentiable leaves (or constants).
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars: Vec<Var> = params.tensors().into_iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        Self::from_vars(params, &vars)
    }

    /// Groups handles already on a tape, given in canonical order, by the
    /// structure of `params`.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one handle per parameter tensor");
        let sources = params
            .sources
            .iter()
            .map(|sp| {
                let encoder = sp.encoder.iter().map(|_| [next(), next(), next()]).collect();
                let head = sp.head.iter().map(|_| [next(), next()]).collect();
                let gate = sp.gate.iter().map(|_| [next(), next()]).collect();
                SourceVars { encoder, head, gate }
            })
            .collect();
        Self { sources, flat: vars.to_vec() }
    }
}

/// A mini-batch laid out per source and per time step.
pub struct Batch {
    pub size: usize,
    /// `steps[s][l]` is the B × d_s slice of step `l` for source `s`.
    pub steps: Vec<Vec<Tensor>>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_instances(cfg: &ModelConfig, instances: &[&WindowedInstance]) -> Result<Self> {
        let n = instances.len();
        let s_count = cfg.n_sources();
        for inst in instances {
            check_instance(cfg, inst)?;
        }
        let steps = (0..s_count)
            .map(|s| {
                let d = cfg.input_dims[s];
                (0..cfg.lookback)
                    .map(|l| {
                        let mut data = Vec::with_capacity(n * d);
                        for inst in instances {
                            data.extend_from_slice(inst.windows[s].row_slice(l));
                        }
                        Tensor::new(n, d, data).expect("rows × d")
                    })
                    .collect()
            })
            .collect();
        Ok(Self { size: n, steps, targets: instances.iter().map(|i| i.target).collect() })
    }
}

fn check_instance(cfg: &ModelConfig, inst: &WindowedInstance) -> Result<()> {
    if inst.windows.len() != cfg.n_sources() {
        return Err(ModelError::SourceCount { got: inst.windows.len(), expected: cfg.n_sources() });
    }
    for (s, w) in inst.windows.iter().enumerate() {
        if w.rows() != cfg.lookback || w.cols() != cfg.input_dims[s] {
            return Err(ModelError::WindowShape {
                source_index: s,
                rows: w.rows(),
                cols: w.cols(),
                lookback: cfg.lookback,
                dim: cfg.input_dims[s],
            });
        }
    }
    Ok(())
}

/// Graph handles produced by [`forward_graph`].
pub struct GraphOutputs {
    /// B × H per source.
    pub reps: Vec<Var>,
    /// B × 1 per source.
    pub mu: Vec<Var>,
    /// B × 1 per source.
    pub sigma2: Vec<Var>,
    /// B × S.
    pub logits: Var,
    /// B × S, `logits − logsumexp(logits)`.
    pub log_weights: Var,
}

/// Runs the LSTM stack over `steps` and returns the last hidden state.
pub fn encode_graph(tape: &mut Tape, layers: &[[Var; 3]], steps: &[Tensor], hidden: usize) -> GradResult<Var> {
    let batch = steps.first().map(|t| t.rows()).unwrap_or(0);
    let mut inputs: Vec<Var> = steps.iter().map(|t| tape.constant(t.clone())).collect();
    let mut last = tape.constant(Tensor::zeros(batch, hidden));
    for [w_in, w_h, b] in layers {
        let mut h = tape.constant(Tensor::zeros(batch, hidden));
        let mut c = tape.constant(Tensor::zeros(batch, hidden));
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            let xw = tape.matmul(x, *w_in)?;
            let hw = tape.matmul(h, *w_h)?;
            let pre = tape.add(xw, hw)?;
            let pre = tape.add(pre, *b)?;
            let hc = tape.lstm_cell(pre, c)?;
            h = tape.slice(hc, 0, hidden)?;
            c = tape.slice(hc, hidden, hidden)?;
            outputs.push(h);
        }
        last = h;
        inputs = outputs;
    }
    Ok(last)
}

fn dense_chain(tape: &mut Tape, layers: &[[Var; 2]], input: Var) -> GradResult<Var> {
    let mut x = input;
    for (i, [w, b]) in layers.iter().enumerate() {
        let z = tape.matmul(x, *w)?;
        let z = tape.add(z, *b)?;
        x = if i + 1 < layers.len() { tape.tanh(z) } else { z };
    }
    Ok(x)
}

/// Distribution head on a representation: returns (μ, σ²), each B × 1.
pub fn head_graph(tape: &mut Tape, layers: &[[Var; 2]], rep: Var) -> GradResult<(Var, Var)> {
    let out = dense_chain(tape, layers, rep)?;
    let mu = tape.slice(out, 0, 1)?;
    let raw = tape.slice(out, 1, 1)?;
    let sp = tape.softplus(raw);
    let floor = tape.constant(Tensor::scalar(SIGMA2_MIN));
    let sigma2 = tape.add(sp, floor)?;
    Ok((mu, sigma2))
}

/// Full forward pass of a batch on `tape`.
pub fn forward_graph(tape: &mut Tape, cfg: &ModelConfig, vars: &ParamVars, batch: &Batch) -> GradResult<GraphOutputs> {
    let mut reps = Vec::new();
    let mut mu = Vec::new();
    let mut sigma2 = Vec::new();
    let mut logits = Vec::new();
    for (s, sv) in vars.sources.iter().enumerate() {
        let rep = encode_graph(tape, &sv.encoder, &batch.steps[s], cfg.hidden)?;
        let (m, v) = head_graph(tape, &sv.head, rep)?;
        let logit = dense_chain(tape, &sv.gate, rep)?;
        reps.push(rep);
        mu.push(m);
        sigma2.push(v);
        logits.push(logit);
    }
    let logits = tape.concat(&logits)?;
    let lse = tape.log_sum_exp(logits)?;
    let log_weights = tape.sub(logits, lse)?;
    Ok(GraphOutputs { reps, mu, sigma2, logits, log_weights })
}

/// Per-source log densities of the batch targets, B × S.
pub fn log_density_graph(tape: &mut Tape, kind: DistKind, out: &GraphOutputs, targets: &[f64]) -> GradResult<Var> {
    let (y, jacobian) = match kind {
        DistKind::Normal => (targets.to_vec(), None),
        DistKind::LogNormal => {
            let ly: Vec<f64> = targets.iter().map(|v| v.ln()).collect();
            let neg: Vec<f64> = ly.iter().map(|v| -v).collect();
            (ly, Some(neg))
        }
    };
    let y = tape.constant(Tensor::column(y));
    let c = tape.constant(Tensor::scalar(LOG_NORM_CONST));
    let jac = jacobian.map(|j| tape.constant(Tensor::column(j)));
    let mut cols = Vec::with_capacity(out.mu.len());
    for (&m, &v) in out.mu.iter().zip(&out.sigma2) {
        let d = tape.sub(y, m)?;
        let d2 = tape.square(d);
        let q = tape.div(d2, v)?;
        let q = tape.scale(q, -0.5);
        let lv = tape.log(v);
        let lv = tape.scale(lv, -0.5);
        let lp = tape.add(q, lv)?;
        let mut lp = tape.add(lp, c)?;
        if let Some(j) = jac {
            lp = tape.add(lp, j)?;
        }
        cols.push(lp);
    }
    tape.concat(&cols)
}

fn column(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::layout(&config);
        let got = params.tensors();
        if expected.len() != got.len() || expected.iter().zip(&got).any(|(s, t)| s.shape != t.shape()) {
            return Err(ModelError::Layout("parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    /// Forward pass for one instance.
    pub fn forward(&self, instance: &WindowedInstance) -> Result<MixtureOutput> {
        Ok(self.forward_batch(std::slice::from_ref(instance))?.remove(0))
    }

    /// Forward pass for many instances; identical to per-instance calls.
    pub fn forward_batch(&self, instances: &[WindowedInstance]) -> Result<Vec<MixtureOutput>> {
        let refs: Vec<&WindowedInstance> = instances.iter().collect();
        self.forward_refs(&refs)
    }

    pub fn forward_refs(&self, instances: &[&WindowedInstance]) -> Result<Vec<MixtureOutput>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(INFERENCE_CHUNK) {
            let batch = Batch::from_instances(&self.config, chunk)?;
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &self.params, false);
            let g = forward_graph(&mut tape, &self.config, &vars, &batch)?;
            let lw = tape.value(g.log_weights);
            let mus: Vec<Vec<f64>> = g.mu.iter().map(|v| column(tape.value(*v))).collect();
            let vars2: Vec<Vec<f64>> = g.sigma2.iter().map(|v| column(tape.value(*v))).collect();
            for b in 0..batch.size {
                out.push(MixtureOutput {
                    kind: self.config.dist,
                    weights: lw.row_slice(b).iter().map(|v| v.exp()).collect(),
                    dist_params: (0..self.config.n_sources()).map(|s| DistParams::new(mus[s][b], vars2[s][b])).collect(),
                    reps: g.reps.iter().map(|r| tape.value(*r).row_slice(b).to_vec()).collect(),
                });
            }
        }
        Ok(out)
    }
}

/// Encodes one source window with the given encoder parameters.
pub fn encode(window: &Tensor, encoder: &[LstmLayer], hidden: usize) -> Result<Vec<f64>> {
    let d = encoder.first().map(|l| l.w_input.rows()).unwrap_or(0);
    if window.cols() != d {
        return Err(ModelError::WindowShape { source_index: 0, rows: window.rows(), cols: window.cols(), lookback: window.rows(), dim: d });
    }
    let mut tape = Tape::new();
    let layers: Vec<[Var; 3]> = encoder
        .iter()
        .map(|l| [tape.constant(l.w_input.clone()), tape.constant(l.w_hidden.clone()), tape.constant(l.bias.clone())])
        .collect();
    let steps: Vec<Tensor> = (0..window.rows()).map(|r| Tensor::row(window.row_slice(r).to_vec())).collect();
    let h = encode_graph(&mut tape, &layers, &steps, hidden)?;
    Ok(tape.value(h).data().to_vec())
}

/// Distribution parameters from a representation.
pub fn head(rep: &[f64], layers: &[Dense]) -> Result<DistParams> {
    let mut tape = Tape::new();
    let vars: Vec<[Var; 2]> = layers.iter().map(|d| [tape.constant(d.weight.clone()), tape.constant(d.bias.clone())]).collect();
    let r = tape.constant(Tensor::row(rep.to_vec()));
    let (m, v) = head_graph(&mut tape, &vars, r)?;
    Ok(DistParams::new(tape.value(m).item(), tape.value(v).item()))
}

/// Softmax of per-source logits; each logit sees only its own source's rep.
pub fn mixture_weights(reps: &[Vec<f64>], gates: &[Vec<Dense>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut logits = Vec::new();
    for (rep, layers) in reps.iter().zip(gates) {
        let vars: Vec<[Var; 2]> = layers.iter().map(|d| [tape.constant(d.weight.clone()), tape.constant(d.bias.clone())]).collect();
        let r = tape.constant(Tensor::row(rep.clone()));
        logits.push(dense_chain(&mut tape, &vars, r)?);
    }
    let l = tape.concat(&logits)?;
    Ok(softmax(tape.value(l).data()))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::grad::log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check_gradients;

    fn instance(cfg: &ModelConfig, seed: u64) -> WindowedInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowedInstance {
            windows: cfg
                .input_dims
                .iter()
                .map(|&d| Tensor::new(cfg.lookback, d, (0..cfg.lookback * d).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap())
                .collect(),
            target: rng.gen_range(0.2..2.0),
            timestamp: 0,
            row: 0,
        }
    }

    fn small_cfg(dist: DistKind) -> ModelConfig {
        ModelConfig::new(vec![3, 2, 4], 5, 4, dist, 9)
    }

    #[test]
    fn zero_encoder_gives_zero_rep() {
        let cfg = small_cfg(DistKind::Normal);
        let p = ModelParams::zeros(&cfg).unwrap();
        let inst = instance(&cfg, 1);
        let rep = encode(&inst.windows[0], &p.sources[0].encoder, cfg.hidden).unwrap();
        assert_eq!(rep, vec![0.0; 4]);
    }

    #[test]
    fn hand_computed_lstm_cell() {
        // d = 1, H = 1, gates driven only by the input weight; bias zero.
        let layer = LstmLayer {
            w_input: Tensor::row(vec![0.5, -0.3, 0.8, 0.2]),
            w_hidden: Tensor::row(vec![0.1, 0.2, -0.4, 0.3]),
            bias: Tensor::row(vec![0.0, 0.1, 0.0, -0.1]),
        };
        let window = Tensor::column(vec![1.0, -2.0]);
        let rep = encode(&window, std::slice::from_ref(&layer), 1).unwrap();

        // manual arithmetic oracle
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for x in [1.0, -2.0] {
            let i = sig(0.5 * x + 0.1 * h);
            let f = sig(-0.3 * x + 0.2 * h + 0.1);
            let g = (0.8 * x - 0.4 * h).tanh();
            let o = sig(0.2 * x + 0.3 * h - 0.1);
            c = f * c + i * g;
            h = o * c.tanh();
        }
        assert!((rep[0] - h).abs() < 1e-15, "{} vs {}", rep[0], h);
        // mpmath at 30 digits
        assert!((rep[0] - 0.009_870_669_623_277_923).abs() < 1e-15, "{}", rep[0]);
    }

    #[test]
    fn head_examples() {
        let zeros = vec![Dense { weight: Tensor::zeros(4, 2), bias: Tensor::zeros(1, 2) }];
        let p = head(&[0.3, -1.0, 2.0, 0.0], &zeros).unwrap();
        assert_eq!(p.mu, 0.0);
        assert!((p.sigma2 - (std::f64::consts::LN_2 + SIGMA2_MIN)).abs() < 1e-15);

        let collapsed = vec![Dense { weight: Tensor::zeros(1, 2), bias: Tensor::row(vec![1.0, -50.0]) }];
        let p = head(&[0.0], &collapsed).unwrap();
        assert_eq!(p.mu, 1.0);
        assert!((p.sigma2 - SIGMA2_MIN).abs() < 1e-12);
    }

    #[test]
    fn weights_examples() {
        let gate = |bias: f64| vec![Dense { weight: Tensor::zeros(2, 1), bias: Tensor::scalar(bias) }];
        let reps = vec![vec![0.1, 0.2]; 4];
        let w = mixture_weights(&reps, &vec![gate(0.7); 4]).unwrap();
        for v in &w {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let w = mixture_weights(&reps[..2], &[gate(2f64.ln()), gate(0.0)]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);

        let base = softmax(&[0.3, -1.2, 2.5]);
        let shifted = softmax(&[100.3, 98.8, 102.5]);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        for dist in [DistKind::Normal, DistKind::LogNormal] {
            let model = Model::new(small_cfg(dist)).unwrap();
            let inst = instance(&model.config, 4);
            let a = model.forward(&inst).unwrap();
            let b = model.forward(&inst).unwrap();
            assert_eq!(a, b);
            assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.dist_params.iter().all(|p| p.sigma2 >= SIGMA2_MIN));
        }
    }

    #[test]
    fn single_source_has_unit_weight() {
        let model = Model::new(ModelConfig::new(vec![2], 3, 3, DistKind::Normal, 1)).unwrap();
        let out = model.forward(&instance(&model.config, 2)).unwrap();
        assert_eq!(out.weights, vec![1.0]);
    }

    #[test]
    fn batch_matches_single_calls_bitwise() {
        let model = Model::new(small_cfg(DistKind::Normal)).unwrap();
        let insts: Vec<_> = (0..7).map(|i| instance(&model.config, 100 + i)).collect();
        let batch = model.forward_batch(&insts).unwrap();
        for (inst, out) in insts.iter().zip(&batch) {
            assert_eq!(&model.forward(inst).unwrap(), out);
        }
    }

    #[test]
    fn permuting_sources_permutes_outputs() {
        let cfg = ModelConfig::new(vec![3, 3, 3], 4, 3, DistKind::Normal, 5);
        let model = Model::new(cfg.clone()).unwrap();
        let inst = instance(&cfg, 8);
        let perm = [2, 0, 1];
        let pmodel = Model {
            config: cfg.clone(),
            params: ModelParams { sources: perm.iter().map(|&s| model.params.sources[s].clone()).collect() },
        };
        let pinst = WindowedInstance { windows: perm.iter().map(|&s| inst.windows[s].clone()).collect(), ..inst.clone() };
        let a = model.forward(&inst).unwrap();
        let b = pmodel.forward(&pinst).unwrap();
        for (k, &s) in perm.iter().enumerate() {
            assert!((b.weights[k] - a.weights[s]).abs() < 1e-12);
            assert_eq!(b.dist_params[k], a.dist_params[s]);
            assert_eq!(b.reps[k], a.reps[s]);
        }
    }

    #[test]
    fn sources_are_separated() {
        let model = Model::new(small_cfg(DistKind::Normal)).unwrap();
        let inst = instance(&model.config, 3);
        let mut other = inst.clone();
        other.windows[1] = other.windows[1].map(|v| v * -2.0 + 0.5);
        let a = model.forward(&inst).unwrap();
        let b = model.forward(&other).unwrap();
        assert_eq!(a.reps[0], b.reps[0]);
        assert_eq!(a.reps[2], b.reps[2]);
        assert_ne!(a.reps[1], b.reps[1]);
    }

    #[test]
    fn window_shape_errors() {
        let model = Model::new(small_cfg(DistKind::Normal)).unwrap();
        let mut inst = instance(&model.config, 3);
        inst.windows[1] = Tensor::zeros(5, 7);
        assert!(matches!(model.forward(&inst), Err(ModelError::WindowShape { source_index: 1, .. })));
        inst.windows.pop();
        assert!(matches!(model.forward(&inst), Err(ModelError::SourceCount { got: 2, expected: 3 })));
    }

    #[test]
    fn layout_round_trips() {
        let mut cfg = small_cfg(DistKind::LogNormal);
        cfg.layers = 2;
        cfg.head_hidden = vec![5];
        let p = ModelParams::init(&cfg).unwrap();
        let layout = ModelParams::layout(&cfg);
        assert_eq!(layout.len(), p.tensors().len());
        let q = ModelParams::from_tensors(&cfg, p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(p, q);
        assert!(layout.iter().any(|s| s.role == Role::Theta));
    }

    #[test]
    fn lstm_and_head_gradients_check() {
        let mut cfg = ModelConfig::new(vec![2], 3, 3, DistKind::Normal, 2);
        cfg.head_hidden = vec![4];
        let p = ModelParams::init(&cfg).unwrap();
        let inst = instance(&cfg, 6);
        let steps: Vec<Tensor> = (0..3).map(|r| Tensor::row(inst.windows[0].row_slice(r).to_vec())).collect();
        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let err = check_gradients(
            |tape, v| {
                let enc = [[v[0], v[1], v[2]]];
                let rep = encode_graph(tape, &enc, &steps, 3)?;
                let (m, s2) = head_graph(tape, &[[v[3], v[4]], [v[5], v[6]]], rep)?;
                let logit = dense_chain(tape, &[[v[7], v[8]], [v[9], v[10]]], rep)?;
                let a = tape.add(m, s2)?;
                let a = tape.add(a, logit)?;
                Ok(tape.sum(a))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }
}
