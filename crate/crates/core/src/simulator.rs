//! Streaming session driver.
//!
//! Source frames are revealed one read chunk at a time. After each read the
//! driver re-encodes everything received so far, lets the model continue the
//! committed prefix, and asks the policy how many of the new candidates may
//! be committed. Committed tokens are stamped with the audio received so far
//! (ideal delay) and with that plus the computation spent so far (wall
//! delay). Once the source is exhausted the remaining hypothesis is
//! committed without gating.

use std::io::{BufRead, Write};
use std::time::Instant;

use ndarray::s;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::{aggregate_attention, compute_alignment};
use crate::error::{Error, Result};
use crate::ingestion::FeatureMatrix;
use crate::model::{DecodeResult, EncoderStates, ModelAdapter, Vocabulary};
use crate::policies::{alignatt_decide, edatt_decide, waitk_allowed, PolicyConfig, PolicyState};

pub const DEFAULT_CHUNK_MS: f64 = 1000.0;
pub const DEFAULT_MAX_NEW: usize = 128;

/// Joins token pieces into text; word marks become spaces.
pub fn detokenize(vocab: &Vocabulary, tokens: &[u32]) -> Result<String> {
    vocab.detokenize(tokens)
}

/// Reveals a fixed source in read chunks.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    total_frames: usize,
    frame_shift_ms: f64,
    chunk_ms: f64,
    reads: usize,
    position: usize,
}

impl StreamCursor {
    pub fn new(total_frames: usize, frame_shift_ms: f64, chunk_ms: f64) -> Result<Self> {
        if !(chunk_ms >= frame_shift_ms) {
            return Err(Error::arg(format!(
                "chunk of {chunk_ms} ms is shorter than the {frame_shift_ms} ms frame shift"
            )));
        }
        Ok(Self { total_frames, frame_shift_ms, chunk_ms, reads: 0, position: 0 })
    }

    /// Delivers the next chunk; returns the number of frames received so far.
    pub fn read(&mut self) -> usize {
        if !self.is_exhausted() {
            self.reads += 1;
            let frames = (self.reads as f64 * self.chunk_ms / self.frame_shift_ms + 1e-9).floor();
            self.position = (frames as usize).min(self.total_frames);
        }
        self.position
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn is_exhausted(&self) -> bool {
        self.position == self.total_frames
    }

    /// Seconds of audio received so far.
    pub fn delivered_s(&self) -> f64 {
        let whole = self.total_frames as f64 * self.frame_shift_ms / 1000.0;
        if self.is_exhausted() {
            whole
        } else {
            (self.reads as f64 * self.chunk_ms / 1000.0).min(whole)
        }
    }
}

/// An adapter call whose cost a [`Clock`] may account for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterCall {
    Encode,
    Decode { new_tokens: usize },
    CountWords,
}

pub trait Clock: Send {
    /// Seconds of computation spent since the session started.
    fn now(&self) -> f64;
    /// Records an adapter call that just finished.
    fn charge(&mut self, call: AdapterCall);
}

/// Declared cost of each adapter call, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeCosts {
    pub encode_s: f64,
    pub decode_s: f64,
    pub token_s: f64,
    pub count_words_s: f64,
}

impl Default for ComputeCosts {
    fn default() -> Self {
        Self { encode_s: 0.02, decode_s: 0.01, token_s: 0.004, count_words_s: 0.005 }
    }
}

/// Advances only by declared costs, so runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct SimulatedClock {
    costs: ComputeCosts,
    elapsed: f64,
}

impl SimulatedClock {
    pub fn new(costs: ComputeCosts) -> Self {
        Self { costs, elapsed: 0.0 }
    }
}

impl Clock for SimulatedClock {
    fn now(&self) -> f64 {
        self.elapsed
    }

    fn charge(&mut self, call: AdapterCall) {
        self.elapsed += match call {
            AdapterCall::Encode => self.costs.encode_s,
            AdapterCall::Decode { new_tokens } => {
                self.costs.decode_s + self.costs.token_s * new_tokens as f64
            }
            AdapterCall::CountWords => self.costs.count_words_s,
        };
    }
}

/// Reads the wall clock; declared costs are ignored.
#[derive(Debug, Clone)]
pub struct RealClock {
    start: Instant,
}

impl Default for RealClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for RealClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn charge(&mut self, _call: AdapterCall) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockConfig {
    Simulated {
        #[serde(default)]
        costs: ComputeCosts,
    },
    Real,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig::Simulated { costs: ComputeCosts::default() }
    }
}

impl ClockConfig {
    pub fn start(&self) -> Box<dyn Clock> {
        match self {
            ClockConfig::Simulated { costs } => Box::new(SimulatedClock::new(costs.clone())),
            ClockConfig::Real => Box::new(RealClock::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionEvent {
    pub token: u32,
    /// Surface piece, word mark included.
    pub text: String,
    pub ideal_s: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogSummary {
    source_duration_s: f64,
    final_text: String,
    num_events: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogRecord {
    Event(EmissionEvent),
    Summary(LogSummary),
}

/// Everything a session committed, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmissionLog {
    pub events: Vec<EmissionEvent>,
    pub source_duration_s: f64,
    pub final_text: String,
}

impl EmissionLog {
    pub fn new(source_duration_s: f64) -> Self {
        Self { events: Vec::new(), source_duration_s, final_text: String::new() }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.token).collect()
    }

    /// One event per line followed by a summary record.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        let summary = LogSummary {
            source_duration_s: self.source_duration_s,
            final_text: self.final_text.clone(),
            num_events: self.events.len(),
        };
        serde_json::to_writer(&mut out, &summary)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut events = Vec::new();
        let mut summary = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::Parse { line: i + 1, msg: "record after summary".into() });
            }
            match serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?
            {
                LogRecord::Event(e) => events.push(e),
                LogRecord::Summary(s) => {
                    if s.num_events != events.len() {
                        return Err(Error::Parse {
                            line: i + 1,
                            msg: format!("summary counts {} events, found {}", s.num_events, events.len()),
                        });
                    }
                    summary = Some(s);
                }
            }
        }
        let s = summary.ok_or(Error::Parse { line: 0, msg: "missing summary record".into() })?;
        Ok(Self { events, source_duration_s: s.source_duration_s, final_text: s.final_text })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    pub chunk_ms: f64,
    /// Decoder layer whose head-mean cross-attention feeds the policy.
    pub aggregation_layer: usize,
    pub max_new: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { chunk_ms: DEFAULT_CHUNK_MS, aggregation_layer: 3, max_new: DEFAULT_MAX_NEW }
    }
}

#[derive(Debug, Error)]
#[error("session failed after {} committed tokens: {source}", partial.events.len())]
pub struct SessionError {
    pub partial: Box<EmissionLog>,
    #[source]
    pub source: Error,
}

struct Session<'a> {
    adapter: &'a dyn ModelAdapter,
    options: &'a SessionOptions,
    clock: &'a mut dyn Clock,
    state: PolicyState,
    log: EmissionLog,
    step: u64,
}

impl Session<'_> {
    fn encode(&mut self, source: &FeatureMatrix, frames: usize) -> Result<EncoderStates> {
        let mut enc = self.adapter.encode(source.frames.slice(s![..frames, ..]))?;
        self.clock.charge(AdapterCall::Encode);
        enc.version = self.step;
        Ok(enc)
    }

    fn decode(&mut self, enc: &EncoderStates) -> Result<DecodeResult> {
        let r = self.adapter.decode_greedy(enc, self.state.committed(), self.options.max_new)?;
        self.clock.charge(AdapterCall::Decode { new_tokens: r.tokens.len() });
        Ok(r)
    }

    fn commit(&mut self, tokens: &[u32], words: usize, ideal_s: f64) -> Result<()> {
        let vocab = &self.adapter.capabilities().vocab;
        let wall_s = ideal_s + self.clock.now();
        for &t in tokens {
            let text = vocab.piece(t)?.to_string();
            self.log.events.push(EmissionEvent { token: t, text, ideal_s, wall_s });
        }
        self.state.commit(tokens, words);
        Ok(())
    }

    /// One policy-gated timestep over the first `frames` source frames.
    fn step(&mut self, source: &FeatureMatrix, frames: usize, ideal_s: f64) -> Result<()> {
        let committed = self.state.committed().len();
        let (tokens, words) = match self.state.config().clone() {
            cfg @ (PolicyConfig::AlignAtt { .. } | PolicyConfig::EdAtt { .. }) => {
                let enc = self.encode(source, frames)?;
                let r = self.decode(&enc)?;
                let agg = aggregate_attention(&r.attention, self.options.aggregation_layer)?;
                let cand = agg.rows(committed..committed + r.tokens.len());
                let decision = match cfg {
                    PolicyConfig::AlignAtt { f } => {
                        alignatt_decide(&compute_alignment(&cand)?, enc.num_frames(), f, r.tokens.len())?
                    }
                    PolicyConfig::EdAtt { alpha, lambda } => {
                        edatt_decide(&cand, alpha, lambda, r.tokens.len())?
                    }
                    _ => unreachable!(),
                };
                (r.tokens[..decision.commit_count].to_vec(), 0)
            }
            PolicyConfig::WaitK { k } => {
                let detected = self.adapter.count_source_words(source.frames.slice(s![..frames, ..]))?;
                self.clock.charge(AdapterCall::CountWords);
                let allowed = waitk_allowed(k, detected, self.state.committed_words());
                if allowed == 0 {
                    (Vec::new(), 0)
                } else {
                    let enc = self.encode(source, frames)?;
                    let r = self.decode(&enc)?;
                    let ends = self.adapter.capabilities().vocab.word_ends(&r.tokens);
                    // the tail word is complete only if the model ended the sentence
                    let complete = if r.eos_reached { ends.len() } else { ends.len().saturating_sub(1) };
                    let units = allowed.min(complete);
                    let upto = if units == 0 { 0 } else { ends[units - 1] };
                    (r.tokens[..upto].to_vec(), units)
                }
            }
            PolicyConfig::LocalAgreement { .. } => {
                let enc = self.encode(source, frames)?;
                let r = self.decode(&enc)?;
                let mut hypothesis = self.state.committed().to_vec();
                hypothesis.extend_from_slice(&r.tokens);
                let decision = self.state.agree(&hypothesis);
                (hypothesis[committed..committed + decision.commit_count].to_vec(), 0)
            }
        };
        self.commit(&tokens, words, ideal_s)
    }

    fn flush(&mut self, source: &FeatureMatrix) -> Result<()> {
        let enc = self.encode(source, source.num_frames())?;
        let r = self.decode(&enc)?;
        let words = self.adapter.capabilities().vocab.word_ends(&r.tokens).len();
        self.commit(&r.tokens, words, self.log.source_duration_s)
    }

    fn run(&mut self, source: &FeatureMatrix) -> Result<()> {
        let mut cursor =
            StreamCursor::new(source.num_frames(), source.frame_shift_ms as f64, self.options.chunk_ms)?;
        loop {
            let frames = cursor.read();
            self.step += 1;
            if cursor.is_exhausted() {
                return self.flush(source);
            }
            self.step(source, frames, cursor.delivered_s())?;
        }
    }

    fn check(&self, source: &FeatureMatrix) -> Result<()> {
        let caps = self.adapter.capabilities();
        if source.num_frames() == 0 {
            return Err(Error::arg("empty source"));
        }
        if source.dim() != caps.feature_dim {
            return Err(Error::dim(format!(
                "source has {} feature dims, model expects {}",
                source.dim(),
                caps.feature_dim
            )));
        }
        if self.options.max_new == 0 {
            return Err(Error::arg("max_new must be >= 1"));
        }
        if self.state.config().uses_attention() && self.options.aggregation_layer >= caps.num_layers {
            return Err(Error::arg(format!(
                "aggregation layer {} out of range for {} decoder layers",
                self.options.aggregation_layer, caps.num_layers
            )));
        }
        Ok(())
    }
}

/// Streams `source` through `adapter` under `policy`, one chunk at a time.
pub fn run_session(
    source: &FeatureMatrix,
    adapter: &dyn ModelAdapter,
    policy: PolicyState,
    options: &SessionOptions,
    clock: &mut dyn Clock,
) -> std::result::Result<EmissionLog, SessionError> {
    let mut session = Session {
        adapter,
        options,
        clock,
        state: policy,
        log: EmissionLog::new(source.duration_s()),
        step: 0,
    };
    let outcome = session.check(source).and_then(|_| session.run(source));
    let vocab = &adapter.capabilities().vocab;
    session.log.final_text = vocab.detokenize(session.state.committed()).unwrap_or_default();
    match outcome {
        Ok(()) => Ok(session.log),
        Err(source) => Err(SessionError { partial: Box::new(session.log), source }),
    }
}
