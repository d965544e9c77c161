//! Training: uniform-timestep ELBO steps over cached token windows, AdamW
//! with warmup + cosine annealing, deterministic batch sampling, and
//! checkpoint/resume that reproduces an uninterrupted run bit for bit.

mod checkpoint;
mod config_file;
mod optimizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config_file::{parse_config, to_text};
pub use optimizer::{adamw_step, clip_grads, global_grad_norm, lr_at, AdamHyper, OptimizerState};

use crate::diffusion::{elbo_loss, q_sample, AbsorbingKernel, DiffusionError, NoiseSchedule, ScheduleKind};
use crate::model::{
    init_parameters, smdim_forward, ModelConfig, ModelError, Parameters, SmdimModel,
};
use crate::remi::{read_cache, RemiError, TokenId, VocabConfig, Vocabulary};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no training windows: dataset is empty or every sequence was dropped")]
    EmptyDataset,
    #[error("vocabulary hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    VocabHashMismatch { expected: u64, found: u64 },
    #[error("non-finite loss at step {step}, batch item {item}, timestep {t}")]
    NonFiniteLoss { step: usize, item: usize, t: usize },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Everything one run needs: optimization hyperparameters, file locations,
/// and the model/vocabulary shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub workers: usize,
    pub checkpoint_path: PathBuf,
    pub dataset_paths: Vec<PathBuf>,
    pub model: ModelConfig,
    pub vocab: VocabConfig,
}

impl TrainConfig {
    /// CPU-minutes profile: the 64-token, width-32 model and a 2000-step
    /// budget sized for the overfit experiment.
    pub fn desk() -> Self {
        let vocab = VocabConfig::default();
        let vocab_size = Vocabulary::new(vocab).size();
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            peak_lr: 5e-4,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            log_every: 50,
            workers: 1,
            checkpoint_path: PathBuf::from("smdim.smck"),
            dataset_paths: Vec::new(),
            model: ModelConfig::desk(vocab_size),
            vocab,
        }
    }

    /// The published full-scale profile: 200k steps, batch 64, 10k warmup.
    pub fn paper() -> Self {
        let vocab = VocabConfig::default();
        let vocab_size = Vocabulary::new(vocab).size();
        TrainConfig {
            steps: 200_000,
            batch_size: 64,
            warmup_steps: 10_000,
            checkpoint_every: 5_000,
            model: ModelConfig::paper(vocab_size),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps >= self.steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be < steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(TrainError::Config(format!(
                "need peak_lr > min_lr >= 0, got {} and {}",
                self.peak_lr, self.min_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        let vocab_size = Vocabulary::new(self.vocab).size();
        if self.model.vocab_size != vocab_size {
            return Err(TrainError::Config(format!(
                "model vocab_size {} disagrees with vocabulary size {vocab_size}",
                self.model.vocab_size
            )));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    pub fn kernel(&self) -> Result<AbsorbingKernel, TrainError> {
        let schedule = NoiseSchedule::new(self.model.t_steps, ScheduleKind::LinearMask)?;
        Ok(AbsorbingKernel::new(self.model.vocab_size - 1, schedule))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent per-(seed, step, item) rng stream; stateless, so resumes and
/// worker counts cannot change the draw sequence.
pub fn stream_seed(seed: u64, step: u64, item: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step).wrapping_add(item.wrapping_mul(0xA24B_AED4_963E_E407)))
}

/// Uniform window sampler over the pooled dataset caches.
#[derive(Debug)]
pub struct BatchSampler {
    windows: Vec<Vec<TokenId>>,
    seed: u64,
}

impl BatchSampler {
    /// Read every cache, reject vocabulary-hash mismatches, and window each
    /// sequence to `seq_len` (PAD-filled, short windows dropped).
    pub fn load(
        paths: &[PathBuf],
        seq_len: usize,
        vocab: &Vocabulary,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let expected = vocab.config_hash();
        let mut windows = Vec::new();
        for path in paths {
            let (hash, sequences) = read_cache(path)?;
            if hash != expected {
                return Err(TrainError::VocabHashMismatch { expected, found: hash });
            }
            for seq in sequences {
                for w in crate::remi::window(&seq, seq_len, vocab) {
                    windows.push(w.ids);
                }
            }
        }
        if windows.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(BatchSampler { windows, seed })
    }

    pub fn from_windows(windows: Vec<Vec<TokenId>>, seed: u64) -> Result<Self, TrainError> {
        if windows.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(BatchSampler { windows, seed })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[Vec<TokenId>] {
        &self.windows
    }

    /// The batch for a given step: uniform over windows, deterministic in
    /// (seed, step).
    pub fn draw(&self, step: u64, batch_size: usize) -> Vec<&[TokenId]> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, step, u64::MAX));
        (0..batch_size)
            .map(|_| self.windows[rng.gen_range(0..self.windows.len())].as_slice())
            .collect()
    }
}

/// Scalars reported per training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub masked_accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

struct ItemResult {
    loss: f64,
    masked: usize,
    correct: usize,
    grads: Vec<Tensor>,
}

fn item_pass(
    params: &Parameters,
    cfg: &TrainConfig,
    kernel: &AbsorbingKernel,
    x0: &[TokenId],
    step: usize,
    item: usize,
) -> Result<ItemResult, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, step as u64, item as u64));
    let t = rng.gen_range(1..=kernel.t_steps());
    let x_t = q_sample(x0, t, kernel, &mut rng)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true, &cfg.model);
    let logits = smdim_forward(&mut tape, &bound, &x_t, t)?;
    let (loss, _breakdown) = elbo_loss(&mut tape, logits, &x_t, x0, t, kernel)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, item, t });
    }

    let mask = kernel.mask_id();
    let lv = tape.value(logits);
    let k = kernel.k_base;
    let mut masked = 0usize;
    let mut correct = 0usize;
    for (i, (&xt, &x0i)) in x_t.iter().zip(x0).enumerate() {
        if xt != mask {
            continue;
        }
        masked += 1;
        let row = &lv.data()[i * k..(i + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == x0i as usize {
            correct += 1;
        }
    }

    let grads_by_var = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .named_vars()
        .zip(params.iter())
        .map(|((_, var), (_, tensor))| grads_by_var.get(var, tensor))
        .collect();
    Ok(ItemResult { loss: loss_val, masked, correct, grads })
}

/// One optimization step over a batch of clean windows: per item sample t,
/// corrupt, forward, ELBO, backward; reduce gradients in item order; clip;
/// AdamW update.
pub fn train_step(
    params: &mut Parameters,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    kernel: &AbsorbingKernel,
    batch: &[&[TokenId]],
    step: usize,
) -> Result<StepMetrics, TrainError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let results: Vec<ItemResult> = if cfg.workers <= 1 || batch.len() == 1 {
        batch
            .iter()
            .enumerate()
            .map(|(i, x0)| item_pass(params, cfg, kernel, x0, step, i))
            .collect::<Result<_, _>>()?
    } else {
        run_items_parallel(params, cfg, kernel, batch, step)?
    };

    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut masked = 0usize;
    let mut correct = 0usize;
    let mut grads: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for r in &results {
        total_loss += r.loss;
        masked += r.masked;
        correct += r.correct;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b * scale;
            }
        }
    }

    let grad_norm = clip_grads(&mut grads, cfg.grad_clip);
    let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.peak_lr, cfg.min_lr);
    adamw_step(params, &grads, opt, lr, &cfg.hyper());

    Ok(StepMetrics {
        step,
        loss: total_loss * scale,
        masked_accuracy: if masked == 0 { 1.0 } else { correct as f64 / masked as f64 },
        grad_norm,
        lr,
    })
}

/// Fan the batch out to `cfg.workers` threads; results come back keyed by
/// item index so the reduction order stays fixed.
fn run_items_parallel(
    params: &Parameters,
    cfg: &TrainConfig,
    kernel: &AbsorbingKernel,
    batch: &[&[TokenId]],
    step: usize,
) -> Result<Vec<ItemResult>, TrainError> {
    let workers = cfg.workers.min(batch.len());
    let mut slots: Vec<Option<Result<ItemResult, TrainError>>> =
        (0..batch.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let items: Vec<usize> = (w..batch.len()).step_by(workers).collect();
            let batch_ref = &batch;
            handles.push(scope.spawn(move || {
                items
                    .into_iter()
                    .map(|i| (i, item_pass(params, cfg, kernel, batch_ref[i], step, i)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every item computed"))
        .collect()
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub model: SmdimModel,
    pub opt: OptimizerState,
    pub history: Vec<StepMetrics>,
}

/// The full loop: load the dataset, initialize or resume, then step to
/// `cfg.steps` with periodic checkpoints (plus one at the end).
pub fn run_training(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab);
    let sampler = BatchSampler::load(&cfg.dataset_paths, cfg.model.seq_len, &vocab, cfg.seed)?;
    let kernel = cfg.kernel()?;

    let (mut params, mut opt, start_step) = match resume {
        None => {
            let params = init_parameters(&cfg.model, cfg.seed)?;
            let opt = OptimizerState::new(&params);
            (params, opt, 0usize)
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.model != cfg.model {
                return Err(TrainError::ResumeMismatch(
                    "checkpoint model config differs from the requested one".into(),
                ));
            }
            if ck.config.vocab != cfg.vocab {
                return Err(TrainError::ResumeMismatch(
                    "checkpoint vocabulary config differs from the requested one".into(),
                ));
            }
            if ck.config.seed != cfg.seed {
                return Err(TrainError::ResumeMismatch(
                    "checkpoint seed differs; resumed runs must keep the original seed".into(),
                ));
            }
            (ck.params, ck.opt, ck.step as usize)
        }
    };

    let mut history = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let batch = sampler.draw(step as u64, cfg.batch_size);
        let metrics = train_step(&mut params, &mut opt, cfg, &kernel, &batch, step)?;
        on_step(&metrics);
        history.push(metrics);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
            save_checkpoint(&cfg.checkpoint_path, cfg, &params, &opt, done as u64)?;
        }
    }
    save_checkpoint(&cfg.checkpoint_path, cfg, &params, &opt, cfg.steps as u64)?;

    Ok(TrainOutcome {
        model: SmdimModel { config: cfg.model.clone(), params },
        opt,
        history,
    })
}

/// Masked-token x0-prediction accuracy at a fixed timestep: corrupt each
/// window `draws` times with derived rng streams and score the argmax at
/// masked positions.
pub fn masked_accuracy_at(
    model: &SmdimModel,
    windows: &[Vec<TokenId>],
    t: usize,
    kernel: &AbsorbingKernel,
    seed: u64,
    draws: usize,
) -> Result<f64, TrainError> {
    let mask = kernel.mask_id();
    let k = kernel.k_base;
    let mut masked = 0usize;
    let mut correct = 0usize;
    for (wi, w) in windows.iter().enumerate() {
        for d in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, wi as u64, d as u64));
            let x_t = q_sample(w, t, kernel, &mut rng)?;
            if x_t.iter().all(|&id| id != mask) {
                continue;
            }
            let logits = model.logits(&x_t, t)?;
            for (i, (&xt, &x0i)) in x_t.iter().zip(w).enumerate() {
                if xt != mask {
                    continue;
                }
                masked += 1;
                let row = &logits.data()[i * k..(i + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                if argmax == x0i as usize {
                    correct += 1;
                }
            }
        }
    }
    if masked == 0 {
        return Err(TrainError::Config(
            "no masked positions sampled; increase draws".into(),
        ));
    }
    Ok(correct as f64 / masked as f64)
}
