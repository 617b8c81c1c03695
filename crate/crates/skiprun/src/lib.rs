//! Decoder-only transformer inference with configurable skipping of deep
//! attention sublayers, MLP sublayers, or whole blocks, plus the measurement
//! harnesses that go with it:
//!
//! - [`tensor`] — dense f32 primitives (matmul, softmax, RMS norm, rotary
//!   embedding, SiLU);
//! - [`model`] — Llama-style architecture, deterministic synthesis, binary
//!   checkpoints, forward pass and greedy decoding over a KV cache;
//! - [`skip`] — resolving a skip request into the exact (layer, sublayer)
//!   pairs to omit;
//! - [`profile`] — per-layer cosine-similarity redundancy profiles;
//! - [`bench`] — compute-matched single-token latency benchmarking;
//! - [`eval`] — perplexity and multiple-choice log-likelihood scoring.
//!
//! The `skiprun` binary exposes all of this on the command line; the book
//! under `book/` walks through the concepts chapter by chapter.

pub mod bench;
pub mod error;
pub mod eval;
pub mod model;
pub mod profile;
pub mod report;
pub mod skip;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    forward, generate, init_random, load_checkpoint, save_checkpoint, ForwardOutput, KvCache,
    ModelConfig, ModelWeights,
};
pub use skip::{SkipMode, SkipSet, SkipSpec};
pub use tensor::Tensor;
