//! The SMDIM denoiser: a hierarchical embed → conv-downsample → MFA-block
//! stack → transposed-conv → head pipeline with diffusion-time conditioning.

mod layers;

pub use layers::{
    attention, ffn, mamba_layer, mfa_block, selective_ssm, selective_ssm_naive, smdim_forward,
    time_embedding, SsmMode, LN_EPS,
};

use crate::remi::TokenId;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

/// Kernel width of the depthwise causal convolution inside each Mamba layer.
pub const MAMBA_CONV_KERNEL: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} at position {pos} out of range for vocabulary {vocab}")]
    TokenOutOfRange { pos: usize, id: TokenId, vocab: usize },
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Stage composition of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrder {
    /// Mamba layers → FeedForward → Attention.
    Mfa,
    /// Attention → FeedForward → Mamba layers.
    Afm,
    MambaOnly,
    AttentionOnly,
}

impl BlockOrder {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "mfa" => Ok(BlockOrder::Mfa),
            "afm" => Ok(BlockOrder::Afm),
            "mamba_only" => Ok(BlockOrder::MambaOnly),
            "attention_only" => Ok(BlockOrder::AttentionOnly),
            other => Err(ModelError::InvalidConfig(format!("unknown block order `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockOrder::Mfa => "mfa",
            BlockOrder::Afm => "afm",
            BlockOrder::MambaOnly => "mamba_only",
            BlockOrder::AttentionOnly => "attention_only",
        }
    }

    pub fn has_mamba(&self) -> bool {
        !matches!(self, BlockOrder::AttentionOnly)
    }

    pub fn has_ffn(&self) -> bool {
        matches!(self, BlockOrder::Mfa | BlockOrder::Afm)
    }

    pub fn has_attention(&self) -> bool {
        !matches!(self, BlockOrder::MambaOnly)
    }
}

/// All architectural dimensions of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Vocabulary size including MASK; logits cover `vocab_size − 1` tokens.
    pub vocab_size: usize,
    /// Input token length L.
    pub seq_len: usize,
    /// Embedding width fed into the downsampling conv.
    pub embed_dim: usize,
    /// Inner model width D the blocks run at.
    pub model_dim: usize,
    /// SSM state dimension N.
    pub state_dim: usize,
    pub heads: usize,
    pub n_blocks: usize,
    /// Mamba layers per block (m).
    pub mamba_layers: usize,
    /// Conv down/upsampling factor s (kernel = stride = s).
    pub stride: usize,
    pub block_order: BlockOrder,
    /// Diffusion steps T the time conditioning covers.
    pub t_steps: usize,
}

impl ModelConfig {
    /// CPU-minutes profile used by the default pipeline and the tests.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            seq_len: 64,
            embed_dim: 32,
            model_dim: 32,
            state_dim: 8,
            heads: 4,
            n_blocks: 2,
            mamba_layers: 2,
            stride: 4,
            block_order: BlockOrder::Mfa,
            t_steps: 32,
        }
    }

    /// The published full-scale profile (2048-token windows, width 512,
    /// 8 blocks, 8 heads, 1024 diffusion steps).
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            seq_len: 2048,
            embed_dim: 512,
            model_dim: 512,
            state_dim: 16,
            heads: 8,
            n_blocks: 8,
            mamba_layers: 2,
            stride: 4,
            block_order: BlockOrder::Mfa,
            t_steps: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("state_dim", self.state_dim),
            ("heads", self.heads),
            ("n_blocks", self.n_blocks),
            ("mamba_layers", self.mamba_layers),
            ("stride", self.stride),
            ("t_steps", self.t_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.seq_len % self.stride != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "seq_len {} not divisible by stride {}",
                self.seq_len, self.stride
            )));
        }
        Ok(())
    }

    /// Sequence length inside the block stack.
    pub fn inner_len(&self) -> usize {
        self.seq_len / self.stride
    }

    /// The parameter schema: names and shapes in deterministic order.
    pub fn param_schema(&self) -> Vec<(String, Vec<usize>)> {
        let (v, de, d, n, s) = (
            self.vocab_size,
            self.embed_dim,
            self.model_dim,
            self.state_dim,
            self.stride,
        );
        let mut schema = vec![
            ("embed.table".to_string(), vec![v, de]),
            ("time.proj".to_string(), vec![de, de]),
            ("down.kernel".to_string(), vec![s, de, d]),
        ];
        for b in 0..self.n_blocks {
            if self.block_order.has_mamba() {
                for m in 0..self.mamba_layers {
                    let p = format!("block{b}.mamba{m}");
                    schema.push((format!("{p}.in_proj"), vec![d, d]));
                    schema.push((format!("{p}.gate_proj"), vec![d, d]));
                    schema.push((format!("{p}.conv"), vec![MAMBA_CONV_KERNEL, d]));
                    schema.push((format!("{p}.s_a"), vec![d, d]));
                    schema.push((format!("{p}.s_b"), vec![d, n]));
                    schema.push((format!("{p}.s_c"), vec![d, n]));
                    schema.push((format!("{p}.a"), vec![d, n]));
                    schema.push((format!("{p}.out_proj"), vec![d, d]));
                    schema.push((format!("{p}.ln.gamma"), vec![d]));
                    schema.push((format!("{p}.ln.beta"), vec![d]));
                }
            }
            if self.block_order.has_ffn() {
                schema.push((format!("block{b}.ffn.w1"), vec![d, 4 * d]));
                schema.push((format!("block{b}.ffn.w2"), vec![4 * d, d]));
                schema.push((format!("block{b}.ffn.ln.gamma"), vec![d]));
                schema.push((format!("block{b}.ffn.ln.beta"), vec![d]));
            }
            if self.block_order.has_attention() {
                for w in ["wq", "wk", "wv", "wo"] {
                    schema.push((format!("block{b}.attn.{w}"), vec![d, d]));
                }
                schema.push((format!("block{b}.attn.ln.gamma"), vec![d]));
                schema.push((format!("block{b}.attn.ln.beta"), vec![d]));
            }
        }
        schema.push(("up.kernel".to_string(), vec![s, d, de]));
        schema.push(("head.w".to_string(), vec![de, v - 1]));
        schema
    }

    /// Total learnable scalars implied by the schema.
    pub fn param_count(&self) -> usize {
        self.param_schema()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// The named learnable arrays, ordered deterministically by the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        Parameters { entries, index }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let i = self.index[name];
        assert_eq!(self.entries[i].1.shape(), t.shape(), "shape change for {name}");
        self.entries[i].1 = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every array on a tape; `trainable` decides whether gradients
    /// flow into them.
    pub fn bind<'a>(&self, tape: &mut Tape, trainable: bool, config: &'a ModelConfig) -> BoundModel<'a> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (name, tensor)) in self.entries.iter().enumerate() {
            let var = if trainable {
                tape.param(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            names.push(name.clone());
            vars.push(var);
            index.insert(name.clone(), i);
        }
        BoundModel { config, names, vars, index }
    }
}

/// Tape-registered view of the parameters for one forward pass.
pub struct BoundModel<'a> {
    pub config: &'a ModelConfig,
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundModel<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Vars in schema order, paired with their names.
    pub fn named_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|n| n.as_str()).zip(self.vars.iter().copied())
    }
}

/// Deterministic initialization: scaled-uniform linear maps, the state
/// matrix A set to −(1..N) on every channel so exp(Δ·A) decays, and the
/// Mamba output projections zeroed.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Parameters, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in config.param_schema() {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".a") {
            let n = config.state_dim;
            Tensor::new(
                shape,
                (0..numel).map(|i| -(((i % n) + 1) as f64)).collect(),
            )
        } else if name.ends_with(".out_proj") {
            Tensor::zeros(shape)
        } else if name.ends_with(".ln.gamma") {
            Tensor::new(shape, vec![1.0; numel])
        } else if name.ends_with(".ln.beta") {
            Tensor::zeros(shape)
        } else {
            // fan-in = product of all extents but the last
            let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        entries.push((name, tensor));
    }
    Ok(Parameters::from_entries(entries))
}

/// A config plus its parameters; implements [`crate::diffusion::Denoiser`].
pub struct SmdimModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl SmdimModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_parameters(&config, seed)?;
        Ok(SmdimModel { config, params })
    }

    /// Forward pass on a fresh, non-trainable tape.
    pub fn logits(&self, tokens: &[TokenId], t: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false, &self.config);
        let out = smdim_forward(&mut tape, &bound, tokens, t)?;
        Ok(tape.value(out).clone())
    }
}

impl crate::diffusion::Denoiser for SmdimModel {
    fn denoise(&self, tokens: &[TokenId], t: usize) -> Tensor {
        self.logits(tokens, t)
            .expect("sampler guarantees in-range tokens and timestep")
    }
}

#[cfg(test)]
mod tests;
