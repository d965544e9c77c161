//! Absorbing-state discrete diffusion over token sequences.
//!
//! The forward process replaces each token independently with MASK at a
//! schedule-controlled rate; by the final step everything is MASK. Because
//! the corruption is absorbing, the per-position posterior
//! `q(x_{t-1} | x_t, x_0)` is closed-form: an unmasked position is a point
//! mass, a masked one reverts to `x_0` with probability
//! `(ᾱ_{t-1} − ᾱ_t)/(1 − ᾱ_t)` and stays MASK otherwise. The ELBO reduces to
//! a reweighted cross-entropy on masked positions; the sampler mixes the
//! model's clean-token prediction with the posterior (x0-parameterization).

pub mod oracle;

use crate::remi::TokenId;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("schedule must have at least one step")]
    EmptySchedule,
    #[error("beta[{index}] = {value} outside (0, 1]")]
    BetaOutOfRange { index: usize, value: f64 },
    #[error("x0 already contains MASK at position {0}")]
    MaskInInput(usize),
    #[error("x_t[{pos}] = {got} differs from x0[{pos}] = {want} without being MASK")]
    UnreachableState { pos: usize, got: TokenId, want: TokenId },
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("logits shape {got:?} does not match sequence length {len} x {k_base} real tokens")]
    LogitsShape { got: Vec<usize>, len: usize, k_base: usize },
    #[error("stride {stride} must be >= 1 and divide T = {t_steps}")]
    BadStride { stride: usize, t_steps: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Schedule selector for [`NoiseSchedule::new`].
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// β_t = 1/(T−t+1): uniform mask-arrival, ᾱ_t = 1 − t/T exactly.
    LinearMask,
    /// Caller-supplied β_1..β_T, each in (0, 1].
    Custom(Vec<f64>),
}

/// Per-step corruption rates and cumulative keep-probabilities.
///
/// `beta(t)` and `alpha_bar(t)` are 1-indexed in t; `alpha_bar(0) = 1` by
/// convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_steps: usize, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if t_steps == 0 {
            return Err(DiffusionError::EmptySchedule);
        }
        match kind {
            ScheduleKind::LinearMask => {
                // closed forms keep the t/T rationals exact; the cumulative
                // product identity is checked in tests
                let tt = t_steps as f64;
                let beta = (1..=t_steps).map(|t| 1.0 / (tt - t as f64 + 1.0)).collect();
                let alpha_bar = (0..=t_steps).map(|t| (tt - t as f64) / tt).collect();
                Ok(NoiseSchedule { beta, alpha_bar })
            }
            ScheduleKind::Custom(beta) => {
                if beta.len() != t_steps {
                    return Err(DiffusionError::EmptySchedule);
                }
                for (i, &b) in beta.iter().enumerate() {
                    if !(b > 0.0 && b <= 1.0) {
                        return Err(DiffusionError::BetaOutOfRange { index: i + 1, value: b });
                    }
                }
                let mut alpha_bar = Vec::with_capacity(t_steps + 1);
                alpha_bar.push(1.0);
                let mut acc = 1.0;
                for &b in &beta {
                    acc *= 1.0 - b;
                    alpha_bar.push(acc);
                }
                Ok(NoiseSchedule { beta, alpha_bar })
            }
        }
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ_t for t in 0..=T; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// The absorbing corruption kernel: `k_base` real token ids 0..k_base, MASK
/// id = k_base (the largest id), plus the schedule.
#[derive(Debug, Clone)]
pub struct AbsorbingKernel {
    pub k_base: usize,
    pub schedule: NoiseSchedule,
}

impl AbsorbingKernel {
    pub fn new(k_base: usize, schedule: NoiseSchedule) -> Self {
        assert!(k_base >= 1);
        AbsorbingKernel { k_base, schedule }
    }

    pub fn mask_id(&self) -> TokenId {
        self.k_base as TokenId
    }

    pub fn t_steps(&self) -> usize {
        self.schedule.t_steps()
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_steps() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.t_steps() });
        }
        Ok(())
    }

    /// Probability that a masked position at step `t` reverts to its clean
    /// token when stepping back to `t_prev` < t; the complement stays MASK.
    fn revert_prob(&self, t: usize, t_prev: usize) -> f64 {
        let ab_prev = self.schedule.alpha_bar(t_prev);
        let ab = self.schedule.alpha_bar(t);
        (ab_prev - ab) / (1.0 - ab)
    }
}

/// The (K_base+1)×(K_base+1) single-step transition matrix: diagonal 1−β_t,
/// column K gets β_t, row K absorbing. Serves as the brute-force oracle's
/// building block; the fast paths below use the closed forms instead.
pub fn build_qt(kernel: &AbsorbingKernel, t: usize) -> Result<Tensor, DiffusionError> {
    kernel.check_t(t)?;
    let k = kernel.k_base;
    let beta = kernel.schedule.beta(t);
    let mut m = vec![0.0; (k + 1) * (k + 1)];
    for i in 0..k {
        m[i * (k + 1) + i] = 1.0 - beta;
        m[i * (k + 1) + k] = beta;
    }
    m[k * (k + 1) + k] = 1.0;
    Ok(Tensor::new(vec![k + 1, k + 1], m))
}

/// Corrupt `x0` to step `t`: each position becomes MASK independently with
/// probability 1−ᾱ_t. `t = 0` returns the input unchanged.
pub fn q_sample(
    x0: &[TokenId],
    t: usize,
    kernel: &AbsorbingKernel,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>, DiffusionError> {
    if t > kernel.t_steps() {
        return Err(DiffusionError::TimestepOutOfRange { t, max: kernel.t_steps() });
    }
    let mask = kernel.mask_id();
    for (i, &id) in x0.iter().enumerate() {
        if id == mask {
            return Err(DiffusionError::MaskInInput(i));
        }
    }
    let keep = kernel.schedule.alpha_bar(t);
    Ok(x0
        .iter()
        .map(|&id| if rng.gen::<f64>() < keep { id } else { mask })
        .collect())
}

/// Exact posterior q(x_{t−1} | x_t, x_0) per position, as dense categorical
/// rows over the K_base+1 states.
pub fn q_posterior(
    x_t: &[TokenId],
    x0: &[TokenId],
    t: usize,
    kernel: &AbsorbingKernel,
) -> Result<Tensor, DiffusionError> {
    kernel.check_t(t)?;
    let mask = kernel.mask_id();
    let k = kernel.k_base;
    let states = k + 1;
    let mut rows = vec![0.0; x_t.len() * states];
    let revert = kernel.revert_prob(t, t - 1);
    for (i, (&xt, &x0i)) in x_t.iter().zip(x0).enumerate() {
        let row = &mut rows[i * states..(i + 1) * states];
        if xt == x0i {
            row[x0i as usize] = 1.0;
        } else if xt == mask {
            row[x0i as usize] = revert;
            row[k] = 1.0 - revert;
        } else {
            return Err(DiffusionError::UnreachableState { pos: i, got: xt, want: x0i });
        }
    }
    Ok(Tensor::new(vec![x_t.len(), states], rows))
}

/// Per-term breakdown reported alongside the scalar ELBO loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    /// Unweighted Σ KL over masked positions (zero at t = 1, where the
    /// reconstruction term takes over).
    pub kl_sum: f64,
    pub recon: f64,
    /// KL[q(x_T|x0) ‖ p(x_T)]: identically zero for the all-MASK prior.
    pub prior: f64,
    /// The reweighting factor applied to the KL sum: max(0, (T−t−1)/T).
    pub weight: f64,
    pub masked_positions: usize,
}

/// ELBO training loss at one timestep, differentiable w.r.t. the logits.
///
/// The model predicts p̃(x0|x_t) via softmax over the K_base real tokens.
/// With the absorbing posterior, KL[q ‖ Σ_{x0'} q(·|x_t,x0')·p̃(x0')] for a
/// masked position collapses to −r_t·log p̃(x0) with r_t the revert
/// probability, so the loss is a weighted pick over the log-softmax:
/// `w_t · Σ_masked −r_t·log p̃(x0)` for t ≥ 2 and the plain reconstruction
/// `Σ_masked −log p̃(x0|x_1)` at t = 1. The t = T prior term is 0.
pub fn elbo_loss(
    tape: &mut Tape,
    x0_logits: Var,
    x_t: &[TokenId],
    x0: &[TokenId],
    t: usize,
    kernel: &AbsorbingKernel,
) -> Result<(Var, ElboBreakdown), DiffusionError> {
    kernel.check_t(t)?;
    let lv = tape.value(x0_logits);
    if lv.shape() != [x_t.len(), kernel.k_base] {
        return Err(DiffusionError::LogitsShape {
            got: lv.shape().to_vec(),
            len: x_t.len(),
            k_base: kernel.k_base,
        });
    }
    if !lv.all_finite() {
        return Err(DiffusionError::NonFiniteLogits);
    }
    let mask = kernel.mask_id();
    let t_total = kernel.t_steps() as f64;
    let weight = ((t_total - t as f64 - 1.0) / t_total).max(0.0);
    let revert = kernel.revert_prob(t, t - 1);

    let logp = tape.log_softmax_last_axis(x0_logits);
    let mut picks = Vec::new();
    let mut masked_positions = 0usize;
    for (i, (&xt, &x0i)) in x_t.iter().zip(x0).enumerate() {
        if xt != mask {
            continue;
        }
        masked_positions += 1;
        let w = if t == 1 { -1.0 } else { -weight * revert };
        picks.push((i, x0i as usize, w));
    }
    let loss = tape.weighted_pick_sum(logp, &picks)?;

    // breakdown from the realized log-probabilities
    let logp_v = tape.value(logp);
    let mut kl_sum = 0.0;
    let mut recon = 0.0;
    for (i, (&xt, &x0i)) in x_t.iter().zip(x0).enumerate() {
        if xt != mask {
            continue;
        }
        let lp = logp_v.at2(i, x0i as usize);
        if t == 1 {
            recon += -lp;
        } else {
            kl_sum += -revert * lp;
        }
    }
    let breakdown = ElboBreakdown {
        total: tape.value(loss).item(),
        kl_sum,
        recon,
        prior: 0.0,
        weight: if t == 1 { 1.0 } else { weight },
        masked_positions,
    };
    Ok((loss, breakdown))
}

/// One reverse step from `t` down to `t_prev`: unmasked positions pass
/// through; each masked position stays MASK with probability
/// `(1−ᾱ_{t_prev})/(1−ᾱ_t)` and otherwise samples a real token from the
/// model's p̃(x0|x_t).
pub fn p_step_between(
    x0_logits: &Tensor,
    x_t: &[TokenId],
    t: usize,
    t_prev: usize,
    kernel: &AbsorbingKernel,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>, DiffusionError> {
    kernel.check_t(t)?;
    assert!(t_prev < t);
    if x0_logits.shape() != [x_t.len(), kernel.k_base] {
        return Err(DiffusionError::LogitsShape {
            got: x0_logits.shape().to_vec(),
            len: x_t.len(),
            k_base: kernel.k_base,
        });
    }
    if !x0_logits.all_finite() {
        return Err(DiffusionError::NonFiniteLogits);
    }
    let mask = kernel.mask_id();
    let stay = 1.0 - kernel.revert_prob(t, t_prev);
    let k = kernel.k_base;

    let mut out = Vec::with_capacity(x_t.len());
    for (i, &xt) in x_t.iter().enumerate() {
        if xt != mask {
            out.push(xt);
            continue;
        }
        if rng.gen::<f64>() < stay {
            out.push(mask);
            continue;
        }
        // sample from softmax of the row
        let row = &x0_logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = j;
                break;
            }
        }
        out.push(chosen as TokenId);
    }
    Ok(out)
}

/// Single reverse step t → t−1 (the spec surface; [`p_step_between`] is the
/// strided generalization).
pub fn p_step(
    x0_logits: &Tensor,
    x_t: &[TokenId],
    t: usize,
    kernel: &AbsorbingKernel,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>, DiffusionError> {
    p_step_between(x0_logits, x_t, t, t - 1, kernel, rng)
}

/// Anything that predicts clean-token logits from a corrupted sequence.
pub trait Denoiser {
    /// Logits over the K_base real tokens, shape [len(tokens), K_base].
    /// Callers guarantee in-range ids and 1 ≤ t ≤ T.
    fn denoise(&self, tokens: &[TokenId], t: usize) -> Tensor;
}

/// Ancestral sampling: start all-MASK at t = T and iterate reverse steps
/// (optionally strided) down to t = 0. The output contains no MASK and is a
/// deterministic function of the rng state.
pub fn sample(
    model: &impl Denoiser,
    len: usize,
    kernel: &AbsorbingKernel,
    rng: &mut impl Rng,
    stride: usize,
) -> Result<Vec<TokenId>, DiffusionError> {
    let t_steps = kernel.t_steps();
    if stride == 0 || t_steps % stride != 0 {
        return Err(DiffusionError::BadStride { stride, t_steps });
    }
    let mut x = vec![kernel.mask_id(); len];
    let mut t = t_steps;
    while t > 0 {
        let logits = model.denoise(&x, t);
        x = p_step_between(&logits, &x, t, t - stride, kernel, rng)?;
        t -= stride;
    }
    debug_assert!(x.iter().all(|&id| id != kernel.mask_id()));
    Ok(x)
}

#[cfg(test)]
mod tests;
