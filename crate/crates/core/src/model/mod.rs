//! A small decoder-only transformer split into an embedding stage and a
//! stack of pre-norm blocks, plus training on synthetic corpora and a
//! binary weight format.

mod corpus;
mod forward;
mod io;
mod train;
mod weights;

pub use corpus::{CorpusSpec, MarkovChain};
pub use train::{train, TrainParams, TrainStats};
pub use weights::{AttentionParams, BlockParams, MlpParams, NormParams, Weights};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architecture hyperparameters. `p_bits` is the nominal per-element
/// precision used in attack-resistance arithmetic, independent of the
/// storage precision the engine runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub p_bits: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidSpec("embed_dim must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.max_context < 2 {
            return Err(Error::InvalidSpec(format!("max_context {} < 2", self.max_context)));
        }
        if !matches!(self.p_bits, 16 | 32 | 64) {
            return Err(Error::InvalidSpec(format!("p_bits {} not one of 16/32/64", self.p_bits)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Immutable weights plus their architecture. All forward and attack
/// entry points hang off this.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization (weights are untrained).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Model { weights: Weights::init(&config, seed), config })
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }
}
