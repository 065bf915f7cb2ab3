use serde::{Deserialize, Serialize};

use crate::grad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// First-order optimizer with per-tensor state. A tensor's Adam step count
/// advances only when that tensor is updated.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_tensors: usize) -> Self {
        Self { kind, state: vec![Moments::default(); n_tensors] }
    }

    /// Updates `params[i]` with `grads[i]` where `active[i]` holds.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], active: &[bool], lr: f64) {
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let g = grads[i].data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let st = &mut self.state[i];
                    if st.m.is_empty() {
                        st.m = vec![0.0; g.len()];
                        st.v = vec![0.0; g.len()];
                    }
                    st.steps += 1;
                    let c1 = 1.0 - beta1.powi(st.steps as i32);
                    let c2 = 1.0 - beta2.powi(st.steps as i32);
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g[k];
                        st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g[k] * g[k];
                        *w -= lr * (st.m[k] / c1) / ((st.v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Rescales the active gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], active: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(active)
        .filter(|(_, a)| **a)
        .flat_map(|(g, _)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (g, _) in grads.iter_mut().zip(active).filter(|(_, a)| **a) {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
