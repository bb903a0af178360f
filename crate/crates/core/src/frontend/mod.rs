//! Sentence-level grapheme-to-phoneme transformer.
//!
//! A deep encoder and a shallow decoder, with interleaved sharing of
//! attention weights across encoder layers and into the decoder, one shared
//! encoder feed-forward block, and per-layer biases. Decoding is greedy and
//! may use a per-layer key/value cache.

mod model;
mod registry;
mod tokenizer;

pub use model::{argmax_allowed, DecodeStrategy, Frontend, KvCache, PhonemeSeq};
pub use registry::{build_registry, frontend_slots, unique_param_count, AttentionGroup, SharingMode, SharingPlan};
pub use tokenizer::{detokenize, tokenize, Inventory, InventoryError, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("frontend config error: {0}")]
    Config(String),
    #[error("empty input text")]
    EmptyInput,
    #[error("input of {len} tokens exceeds max_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("decoder state error: {0}")]
    State(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Inner width of decoder feed-forward blocks.
    pub d_ff: usize,
    /// Inner width of encoder feed-forward blocks. Equal to `d_ff` unless the
    /// shared encoder block is widened to rebalance capacity.
    pub d_ff_enc: usize,
    pub grapheme_vocab: usize,
    pub phoneme_vocab: usize,
    /// Longest accepted input and longest emitted phoneme sequence.
    pub max_len: usize,
    pub decode: DecodeStrategy,
    pub sharing: SharingMode,
}

impl FrontendConfig {
    /// 16 encoder / 5 decoder layers, no sharing, prefix recomputation.
    pub fn baseline() -> Self {
        FrontendConfig {
            n_enc: 16,
            n_dec: 5,
            d_model: 256,
            heads: 4,
            d_ff: 768,
            d_ff_enc: 768,
            grapheme_vocab: Inventory::default_graphemes().len(),
            phoneme_vocab: Inventory::default_phonemes().len(),
            max_len: 48,
            decode: DecodeStrategy::Recompute,
            sharing: SharingMode::Baseline,
        }
    }

    /// 20 encoder / 1 decoder layer, shared weights, cached decoding.
    pub fn optimized() -> Self {
        FrontendConfig {
            n_enc: 20,
            n_dec: 1,
            d_ff_enc: 10240,
            decode: DecodeStrategy::Cached,
            sharing: SharingMode::Shared,
            ..Self::baseline()
        }
    }

    /// Small configuration for tests.
    pub fn toy() -> Self {
        FrontendConfig {
            n_enc: 3,
            n_dec: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            d_ff_enc: 16,
            grapheme_vocab: 10,
            phoneme_vocab: 12,
            max_len: 16,
            decode: DecodeStrategy::Cached,
            sharing: SharingMode::Shared,
        }
    }

    pub fn plan(&self) -> SharingPlan {
        SharingPlan::new(self.sharing)
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let fail = |m: String| Err(FrontendError::Config(m));
        if self.n_dec < 1 || self.n_enc < self.n_dec {
            return fail(format!("need n_enc >= n_dec >= 1, got {}-{}", self.n_enc, self.n_dec));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.d_ff_enc == 0 {
            return fail("feed-forward widths must be positive".into());
        }
        if self.grapheme_vocab <= UNK as usize || self.phoneme_vocab <= UNK as usize {
            return fail("vocabularies must include the four special tokens".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }
}
