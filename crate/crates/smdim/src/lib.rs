//! SMDIM: symbolic music generation with absorbing-state discrete diffusion
//! and a hierarchical Mamba-FeedForward-Attention denoiser.
//!
//! The crate covers the full desk-scale pipeline: Standard MIDI File I/O,
//! REMI tokenization, the diffusion process and its ELBO loss, the denoiser
//! network on a small reverse-mode tensor core, training with AdamW,
//! overlap-area evaluation, and a compute-scaling benchmark harness.

pub mod bench;
pub mod diffusion;
pub mod eval;
pub mod midi;
pub mod model;
pub mod remi;
pub mod tensor;
pub mod train;
