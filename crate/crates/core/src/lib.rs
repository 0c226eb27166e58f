//! Simultaneous speech translation policies and evaluation.
//!
//! The crate decides, timestep by timestep, how much of a model's greedy
//! hypothesis can be committed while source audio is still arriving. It
//! provides the attention-alignment stopping rule (AlignAtt) together with
//! EDAtt, wait-k and Local Agreement baselines, a streaming simulator that
//! records ideal and computation-aware delays, and AL/LAAL/BLEU scoring.

pub mod attn;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingestion;
pub mod metrics;
pub mod model;
pub mod policies;
pub mod simulator;
pub mod synth;

pub use error::{Error, Result};
