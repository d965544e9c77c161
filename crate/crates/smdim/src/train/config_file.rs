//! `key = value` training-configuration files: `#` starts a comment, unknown
//! keys are errors, and a `profile` key picks the desk or paper defaults the
//! remaining keys override.

use super::{TrainConfig, TrainError};
use crate::model::BlockOrder;
use crate::remi::Vocabulary;
use std::path::PathBuf;

pub fn parse_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(TrainError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        pairs.push((lineno + 1, key.trim().to_string(), value.trim().to_string()));
    }

    let mut cfg = match pairs.iter().find(|(_, k, _)| k == "profile") {
        None => TrainConfig::desk(),
        Some((line, _, v)) => match v.as_str() {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => {
                return Err(TrainError::Config(format!(
                    "line {line}: unknown profile `{other}` (desk or paper)"
                )))
            }
        },
    };

    for (line, key, value) in &pairs {
        apply_key(&mut cfg, key, value)
            .map_err(|msg| TrainError::Config(format!("line {line}: {msg}")))?;
    }
    cfg.model.vocab_size = Vocabulary::new(cfg.vocab).size();
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("invalid value `{value}` for key `{key}`"))
    }
    match key {
        "profile" => {} // handled up front
        "steps" => cfg.steps = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "peak_lr" => cfg.peak_lr = num(key, value)?,
        "min_lr" => cfg.min_lr = num(key, value)?,
        "warmup_steps" => cfg.warmup_steps = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "grad_clip" => cfg.grad_clip = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = num(key, value)?,
        "log_every" => cfg.log_every = num(key, value)?,
        "workers" => cfg.workers = num::<usize>(key, value)?.max(1),
        "checkpoint_path" => cfg.checkpoint_path = PathBuf::from(value),
        "dataset" => {
            for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                cfg.dataset_paths.push(PathBuf::from(part));
            }
        }
        "seq_len" => cfg.model.seq_len = num(key, value)?,
        "embed_dim" => cfg.model.embed_dim = num(key, value)?,
        "model_dim" => cfg.model.model_dim = num(key, value)?,
        "state_dim" => cfg.model.state_dim = num(key, value)?,
        "heads" => cfg.model.heads = num(key, value)?,
        "n_blocks" => cfg.model.n_blocks = num(key, value)?,
        "mamba_layers" => cfg.model.mamba_layers = num(key, value)?,
        "stride" => cfg.model.stride = num(key, value)?,
        "t_steps" => cfg.model.t_steps = num(key, value)?,
        "block_order" => {
            cfg.model.block_order = BlockOrder::parse(value).map_err(|e| e.to_string())?
        }
        "grid" => cfg.vocab.grid = num(key, value)?,
        "velocity_bins" => cfg.vocab.velocity_bins = num(key, value)?,
        "duration_bins" => cfg.vocab.duration_bins = num(key, value)?,
        "tempo_bins" => cfg.vocab.tempo_bins = num(key, value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Canonical text form; `parse_config(to_text(c))` reproduces `c`. Embedded
/// in checkpoints.
pub fn to_text(cfg: &TrainConfig) -> String {
    let datasets: Vec<String> = cfg
        .dataset_paths
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("steps", cfg.steps.to_string());
    push("batch_size", cfg.batch_size.to_string());
    push("peak_lr", format!("{:e}", cfg.peak_lr));
    push("min_lr", format!("{:e}", cfg.min_lr));
    push("warmup_steps", cfg.warmup_steps.to_string());
    push("weight_decay", format!("{:e}", cfg.weight_decay));
    push("grad_clip", format!("{:e}", cfg.grad_clip));
    push("seed", cfg.seed.to_string());
    push("checkpoint_every", cfg.checkpoint_every.to_string());
    push("log_every", cfg.log_every.to_string());
    push("workers", cfg.workers.to_string());
    push("checkpoint_path", cfg.checkpoint_path.to_string_lossy().into_owned());
    if !datasets.is_empty() {
        push("dataset", datasets.join(","));
    }
    push("seq_len", cfg.model.seq_len.to_string());
    push("embed_dim", cfg.model.embed_dim.to_string());
    push("model_dim", cfg.model.model_dim.to_string());
    push("state_dim", cfg.model.state_dim.to_string());
    push("heads", cfg.model.heads.to_string());
    push("n_blocks", cfg.model.n_blocks.to_string());
    push("mamba_layers", cfg.model.mamba_layers.to_string());
    push("stride", cfg.model.stride.to_string());
    push("t_steps", cfg.model.t_steps.to_string());
    push("block_order", cfg.model.block_order.name().to_string());
    push("grid", cfg.vocab.grid.to_string());
    push("velocity_bins", cfg.vocab.velocity_bins.to_string());
    push("duration_bins", cfg.vocab.duration_bins.to_string());
    push("tempo_bins", cfg.vocab.tempo_bins.to_string());
    out
}
