//! Learning-rate schedule (linear warmup → cosine annealing) and AdamW with
//! decoupled weight decay.

use crate::model::Parameters;
use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Linear ramp 0 → peak over `warmup_steps`, then cosine from peak down to
/// `min_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64, min_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators mirroring the parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update: decoupled decay `w ← w·(1 − lr·wd)` plus the
/// bias-corrected Adam step. `grads` is parallel to the parameter entries.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
) {
    assert_eq!(grads.len(), params.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.get_mut(name).data_mut();
        debug_assert_eq!(g.len(), w.len(), "gradient shape mismatch for {name}");
        for j in 0..w.len() {
            w[j] *= 1.0 - lr * hyper.weight_decay;
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

/// Global L2 norm across all gradient arrays.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale every gradient so the global norm does not exceed `max_norm`.
pub fn clip_grads(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
