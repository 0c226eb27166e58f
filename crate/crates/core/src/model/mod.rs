//! The incremental encoder-decoder contract consumed by the simulator.
//!
//! An adapter turns the source features received so far into encoder
//! states, continues a forced target prefix greedily while exposing the
//! cross-attention of every decoder layer and head, and counts completed
//! source words for word-scheduled policies. Implementations must be
//! deterministic and callable from several threads.

pub mod bridge;
pub mod ctc;
pub mod toy;
pub mod vocab;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attn::AttentionTensor;
use crate::error::Result;

pub use bridge::BridgeAdapter;
pub use toy::{ToyConfig, ToyModel};
pub use vocab::{Vocabulary, WORD_MARK};

/// Reduction factor between input feature frames and encoder states.
pub const LENGTH_REDUCTION: usize = 4;

/// Encoder states after length reduction, `n = ceil(T / 4)` for the default
/// front-end.
pub fn reduced_length(raw_frames: usize) -> usize {
    raw_frames.div_ceil(LENGTH_REDUCTION)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub num_layers: usize,
    pub num_heads: usize,
    pub feature_dim: usize,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    /// `n × d_model`
    pub states: Array2<f64>,
    /// Timestep at which these states were produced.
    pub version: u64,
}

impl EncoderStates {
    pub fn num_frames(&self) -> usize {
        self.states.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// New tokens after the forced prefix; end-of-sequence is not included.
    pub tokens: Vec<u32>,
    /// One row per decoded position: forced prefix first, then `tokens`.
    pub attention: AttentionTensor,
    pub eos_reached: bool,
}

pub trait ModelAdapter: Send + Sync {
    fn capabilities(&self) -> &Capabilities;

    fn encode(&self, features: ArrayView2<'_, f32>) -> Result<EncoderStates>;

    /// Teacher-forces `forced_prefix`, then extends it greedily by at most
    /// `max_new` tokens or until end-of-sequence.
    fn decode_greedy(
        &self,
        enc: &EncoderStates,
        forced_prefix: &[u32],
        max_new: usize,
    ) -> Result<DecodeResult>;

    /// Number of completed source words detected in `features`.
    fn count_source_words(&self, features: ArrayView2<'_, f32>) -> Result<usize>;
}

impl<T: ModelAdapter + ?Sized> ModelAdapter for Box<T> {
    fn capabilities(&self) -> &Capabilities {
        (**self).capabilities()
    }

    fn encode(&self, features: ArrayView2<'_, f32>) -> Result<EncoderStates> {
        (**self).encode(features)
    }

    fn decode_greedy(&self, enc: &EncoderStates, prefix: &[u32], max_new: usize) -> Result<DecodeResult> {
        (**self).decode_greedy(enc, prefix, max_new)
    }

    fn count_source_words(&self, features: ArrayView2<'_, f32>) -> Result<usize> {
        (**self).count_source_words(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_rounds_up() {
        assert_eq!(reduced_length(8), 2);
        assert_eq!(reduced_length(9), 3);
        assert_eq!(reduced_length(1), 1);
    }
}
