//! Brute-force reference route for the diffusion math, computed through
//! explicit transition-matrix products and Bayes' rule rather than the
//! closed forms. Exists solely so the test suites can cross-check
//! `q_sample` marginals, `q_posterior`, and `elbo_loss` against an
//! independent derivation; nothing in the library calls into it.

use super::{build_qt, AbsorbingKernel};
use crate::remi::TokenId;
use crate::tensor::Tensor;

/// Q_1 · Q_2 · … · Q_t as a dense (K+1)×(K+1) matrix; the identity at t = 0.
pub fn cumulative_transition(kernel: &AbsorbingKernel, t: usize) -> Tensor {
    let states = kernel.k_base + 1;
    let mut acc = identity(states);
    for step in 1..=t {
        let q = build_qt(kernel, step).expect("step in range");
        acc = mat_mul(&acc, &q);
    }
    acc
}

/// Marginal q(x_t | x_0 = x0) as a row over the K+1 states.
pub fn q_sample_marginal(kernel: &AbsorbingKernel, x0: TokenId, t: usize) -> Vec<f64> {
    let m = cumulative_transition(kernel, t);
    let states = kernel.k_base + 1;
    m.data()[x0 as usize * states..(x0 as usize + 1) * states].to_vec()
}

/// Posterior q(x_{t−1} = j | x_t, x_0) via Bayes over the matrix products:
/// `Q_t[j, x_t] · Q̄_{t−1}[x_0, j] / Q̄_t[x_0, x_t]`.
pub fn q_posterior_row(kernel: &AbsorbingKernel, x_t: TokenId, x0: TokenId, t: usize) -> Vec<f64> {
    let states = kernel.k_base + 1;
    let qt = build_qt(kernel, t).expect("step in range");
    let prev = cumulative_transition(kernel, t - 1);
    let cur = cumulative_transition(kernel, t);
    let denom = cur.at2(x0 as usize, x_t as usize);
    let mut row = vec![0.0; states];
    for (j, slot) in row.iter_mut().enumerate() {
        *slot = qt.at2(j, x_t as usize) * prev.at2(x0 as usize, j) / denom;
    }
    row
}

/// The model's reverse transition p_θ(x_{t−1} | x_t) for one masked
/// position: the posterior mixed over p̃(x0').
pub fn posterior_mixture(
    kernel: &AbsorbingKernel,
    p_tilde: &[f64],
    x_t: TokenId,
    t: usize,
) -> Vec<f64> {
    let states = kernel.k_base + 1;
    let mut out = vec![0.0; states];
    for (x0, &w) in p_tilde.iter().enumerate() {
        let row = q_posterior_row(kernel, x_t, x0 as TokenId, t);
        for j in 0..states {
            out[j] += w * row[j];
        }
    }
    out
}

/// KL(q ‖ p) with the 0·ln(0/·) = 0 convention.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi).ln())
        .sum()
}

/// The full loss assembled from matrix-derived distributions: per masked
/// position the KL between the true posterior and the p̃-mixture, reweighted
/// by max(0, (T−t−1)/T) for t ≥ 2, or the reconstruction −log p̃(x0) at t = 1.
pub fn elbo_loss(
    logits: &Tensor,
    x_t: &[TokenId],
    x0: &[TokenId],
    t: usize,
    kernel: &AbsorbingKernel,
) -> f64 {
    let mask = kernel.mask_id();
    let t_total = kernel.t_steps() as f64;
    let weight = ((t_total - t as f64 - 1.0) / t_total).max(0.0);
    let k = kernel.k_base;

    let mut total = 0.0;
    for (i, (&xt, &x0i)) in x_t.iter().zip(x0).enumerate() {
        if xt != mask {
            continue;
        }
        let p_tilde = softmax(&logits.data()[i * k..(i + 1) * k]);
        if t == 1 {
            total += -p_tilde[x0i as usize].ln();
        } else {
            let q_row = q_posterior_row(kernel, xt, x0i, t);
            let p_row = posterior_mixture(kernel, &p_tilde, xt, t);
            total += weight * kl_divergence(&q_row, &p_row);
        }
    }
    total
}

fn identity(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], m)
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                s += a.at2(i, p) * b.at2(p, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
