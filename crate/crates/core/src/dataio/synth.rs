use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, MultiSourceDataset, Result, SourceSeries, SplitFractions};
use crate::distributions::{std_normal_sample, DistKind, DistParams};
use crate::grad::Tensor;

/// Regime-switching generator. A hidden Markov regime `z_t` selects which
/// source's AR(1) signal drives the target:
///
/// `y_t = β·a_{z_t, t−1} + σ_{z_t}·ε_t` (exponentiated in log-normal mode).
///
/// Source `s` observes a noisy copy of `a_s`, an activity indicator
/// `1{z_t = s}` plus noise, and an irrelevant AR(1) distractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sources: usize,
    pub length: usize,
    pub dist: DistKind,
    pub seed: u64,
    pub stay_prob: f64,
    pub ar_coef: f64,
    pub beta: f64,
    /// Noise scale per regime; cycled if shorter than `n_sources`.
    pub regime_sigma: Vec<f64>,
    pub signal_noise: f64,
    pub activity_noise: f64,
    /// Relative jump-destination weights per regime; cycled like `regime_sigma`.
    pub regime_weights: Vec<f64>,
    /// Relabels source/regime `s` as `perm[s]`.
    pub label_permutation: Option<Vec<usize>>,
    pub interval_seconds: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::new(3, 20_000, DistKind::Normal, 0)
    }
}

impl SynthConfig {
    pub fn new(n_sources: usize, length: usize, dist: DistKind, seed: u64) -> Self {
        Self {
            n_sources,
            length,
            dist,
            seed,
            stay_prob: 0.98,
            ar_coef: 0.9,
            beta: 1.0,
            regime_sigma: vec![0.2, 0.35, 0.5],
            signal_noise: 0.2,
            activity_noise: 0.6,
            regime_weights: vec![1.0],
            label_permutation: None,
            interval_seconds: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.n_sources < 2 {
            return bad(format!("synthetic data needs at least 2 sources, got {}", self.n_sources));
        }
        if self.length < 1000 {
            return bad(format!("synthetic length must be at least 1000, got {}", self.length));
        }
        if !(0.0..1.0).contains(&self.stay_prob) || !(-1.0 < self.ar_coef && self.ar_coef < 1.0) {
            return bad("stay_prob must lie in [0, 1) and ar_coef in (-1, 1)".into());
        }
        if self.regime_sigma.is_empty() || self.regime_sigma.iter().any(|s| !(*s > 0.0)) {
            return bad("regime_sigma must be non-empty and positive".into());
        }
        if self.regime_weights.is_empty() || self.regime_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("regime_weights must be non-empty and positive".into());
        }
        if !(self.signal_noise >= 0.0 && self.activity_noise > 0.0 && self.interval_seconds > 0) {
            return bad("noise scales and interval must be positive".into());
        }
        if let Some(p) = &self.label_permutation {
            let mut seen = vec![false; self.n_sources];
            if p.len() != self.n_sources || p.iter().any(|&k| k >= self.n_sources || std::mem::replace(&mut seen[k], true)) {
                return bad(format!("label_permutation must be a permutation of 0..{}", self.n_sources));
            }
        }
        Ok(())
    }

    fn sigma(&self, s: usize) -> f64 {
        self.regime_sigma[s % self.regime_sigma.len()]
    }

    fn weight(&self, s: usize) -> f64 {
        self.regime_weights[s % self.regime_weights.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthGroundTruth {
    pub regime: Vec<usize>,
    /// Per-regime `(μ, σ²)` at each step, in the target's distribution.
    pub component: Vec<DistParams>,
    pub cond_mean: Vec<f64>,
    pub cond_var: Vec<f64>,
    pub regime_sigma: Vec<f64>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(MultiSourceDataset, SynthGroundTruth)> {
    cfg.validate()?;
    let (s_count, t_len) = (cfg.n_sources, cfg.length);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();

    let total_w: f64 = (0..s_count).map(|s| cfg.weight(s)).sum();
    let mut regime = Vec::with_capacity(t_len);
    let mut z = 0usize;
    for t in 0..t_len {
        if t > 0 && rng.gen::<f64>() < cfg.stay_prob {
            regime.push(z);
            continue;
        }
        let pool = if t == 0 { total_w } else { total_w - cfg.weight(z) };
        let mut r = rng.gen::<f64>() * pool;
        let candidates: Vec<usize> = (0..s_count).filter(|&s| t == 0 || s != z).collect();
        let mut pick = *candidates.last().expect("at least two regimes");
        for &s in &candidates {
            r -= cfg.weight(s);
            if r < 0.0 {
                pick = s;
                break;
            }
        }
        z = pick;
        regime.push(z);
    }
    let mut normal = || std_normal_sample(&mut rng);

    let mut signal = vec![vec![0.0; t_len]; s_count];
    let mut distractor = vec![vec![0.0; t_len]; s_count];
    for s in 0..s_count {
        signal[s][0] = normal();
        distractor[s][0] = normal();
        for t in 1..t_len {
            signal[s][t] = cfg.ar_coef * signal[s][t - 1] + innov * normal();
            distractor[s][t] = cfg.ar_coef * distractor[s][t - 1] + innov * normal();
        }
    }

    let mut target = vec![0.0; t_len];
    let mut component = Vec::with_capacity(t_len);
    let mut cond_mean = Vec::with_capacity(t_len);
    let mut cond_var = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let k = regime[t];
        let prev = if t == 0 { 0.0 } else { signal[k][t - 1] };
        let p = DistParams::new(cfg.beta * prev, cfg.sigma(k).powi(2));
        let x = p.mu + cfg.sigma(k) * normal();
        target[t] = match cfg.dist {
            DistKind::Normal => x,
            DistKind::LogNormal => x.exp(),
        };
        cond_mean.push(cfg.dist.mean(&p));
        cond_var.push(cfg.dist.variance(&p));
        component.push(p);
    }

    let mut sources = Vec::with_capacity(s_count);
    let timestamps: Vec<i64> = (0..t_len as i64).map(|k| k * cfg.interval_seconds).collect();
    for s in 0..s_count {
        let mut data = Vec::with_capacity(t_len * 3);
        for t in 0..t_len {
            let active = if regime[t] == s { 1.0 } else { 0.0 };
            data.extend([
                signal[s][t] + cfg.signal_noise * normal(),
                active + cfg.activity_noise * normal(),
                distractor[s][t],
            ]);
        }
        sources.push(SourceSeries {
            source_id: format!("src{}", s),
            market_id: "synthetic".into(),
            feature_names: vec!["signal".into(), "activity".into(), "distractor".into()],
            timestamps: timestamps.clone(),
            values: Tensor::new(t_len, 3, data).expect("T × 3"),
            interval_seconds: cfg.interval_seconds,
        });
    }
    let mut regime_sigma: Vec<f64> = (0..s_count).map(|s| cfg.sigma(s)).collect();

    if let Some(perm) = &cfg.label_permutation {
        let mut relabeled = sources.clone();
        let mut sig = regime_sigma.clone();
        for (s, &p) in perm.iter().enumerate() {
            relabeled[p] = SourceSeries { source_id: format!("src{}", p), ..sources[s].clone() };
            sig[p] = regime_sigma[s];
        }
        sources = relabeled;
        regime_sigma = sig;
        for z in &mut regime {
            *z = perm[*z];
        }
    }

    let ds = MultiSourceDataset {
        sources,
        timestamps,
        interval_seconds: cfg.interval_seconds,
        target,
        seasonal_profile: None,
        splits: SplitFractions::default(),
    };
    Ok((ds, SynthGroundTruth { regime, component, cond_mean, cond_var, regime_sigma }))
}

/// Bayes regime identification from the activity features: an HMM forward
/// filter over rows `..t−h` predicting `z_t`. Returns the argmax per row
/// (row 0 uses the stationary guess 0).
pub fn bayes_regime_filter(ds: &MultiSourceDataset, cfg: &SynthConfig, horizon: usize) -> Vec<usize> {
    let s_count = ds.sources.len();
    let t_len = ds.len();
    let jump = 1.0 - cfg.stay_prob;
    let var = cfg.activity_noise * cfg.activity_noise;
    // relabeling permutes sources and regimes together, so weights follow
    let weight_of = |k: usize| -> f64 {
        match &cfg.label_permutation {
            Some(p) => cfg.weight(p.iter().position(|&q| q == k).expect("permutation")),
            None => cfg.weight(k),
        }
    };
    let total_w: f64 = (0..s_count).map(weight_of).sum();
    let transition = |from: usize, to: usize| -> f64 {
        if from == to {
            cfg.stay_prob
        } else {
            jump * weight_of(to) / (total_w - weight_of(from))
        }
    };
    let predict = |post: &[f64]| -> Vec<f64> { (0..s_count).map(|k| (0..s_count).map(|j| post[j] * transition(j, k)).sum()).collect() };

    let mut filtered: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut prior: Vec<f64> = (0..s_count).map(|k| weight_of(k) / total_w).collect();
    for t in 0..t_len {
        let mut post: Vec<f64> = (0..s_count)
            .map(|k| {
                let ll: f64 = (0..s_count)
                    .map(|s| {
                        let a = ds.sources[s].values.get(t, 1) - if s == k { 1.0 } else { 0.0 };
                        -0.5 * a * a / var
                    })
                    .sum();
                prior[k].ln() + ll
            })
            .collect();
        let m = post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = post.iter().map(|v| (v - m).exp()).sum();
        post.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        prior = predict(&post);
        filtered.push(post);
    }
    (0..t_len)
        .map(|t| {
            if t < horizon {
                return 0;
            }
            let mut p = filtered[t - horizon].clone();
            for _ in 0..horizon {
                p = predict(&p);
            }
            argmax(&p)
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
