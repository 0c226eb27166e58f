//! Simultaneous decision policies.
//!
//! Every policy answers the same question at a timestep: how many of the
//! freshly decoded candidate tokens may be committed now. The answer is a
//! prefix length, so committed output only ever grows by appending.

use serde::{Deserialize, Serialize};

use crate::attn::{AlignmentVector, AttentionMatrix};
use crate::error::{Error, Result};

/// Default number of trailing frames EDAtt sums attention over.
pub const DEFAULT_EDATT_LAMBDA: usize = 2;
/// Default Local Agreement window (current vs. one previous hypothesis).
pub const DEFAULT_LA_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A candidate attended mostly to a not-yet-reliable trailing frame.
    InaccessibleFrame,
    /// Trailing attention mass reached the EDAtt threshold.
    Threshold,
    /// The wait-k schedule does not allow more words yet.
    Schedule,
    /// Consecutive hypotheses diverge at this point.
    Disagreement,
    /// Every offered candidate was committed.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    pub commit_count: usize,
    pub stopped_by: StopReason,
}

impl PolicyDecision {
    fn gated(commit_count: usize, offered: usize, reason: StopReason) -> Self {
        let stopped_by = if commit_count < offered { reason } else { StopReason::Exhausted };
        Self { commit_count, stopped_by }
    }
}

/// AlignAtt: commit candidates until the first one whose most attended frame
/// is among the last `f` of the `n` received frames.
pub fn alignatt_decide(
    align: &AlignmentVector,
    n: usize,
    f: usize,
    num_candidates: usize,
) -> Result<PolicyDecision> {
    if f == 0 {
        return Err(Error::arg("AlignAtt needs f >= 1"));
    }
    if align.len() < num_candidates {
        return Err(Error::arg(format!(
            "{num_candidates} candidates but only {} alignments",
            align.len()
        )));
    }
    if let Some(&bad) = align.iter().find(|&&j| j >= n) {
        return Err(Error::arg(format!("alignment index {bad} outside {n} frames")));
    }
    // f >= n makes every frame inaccessible
    let band_start = n.saturating_sub(f);
    let commit = align[..num_candidates].iter().take_while(|&&j| j < band_start).count();
    Ok(PolicyDecision::gated(commit, num_candidates, StopReason::InaccessibleFrame))
}

/// EDAtt: commit candidates while the attention mass on the last `lambda`
/// frames stays below `alpha`.
pub fn edatt_decide(
    attn: &AttentionMatrix,
    alpha: f64,
    lambda: usize,
    num_candidates: usize,
) -> Result<PolicyDecision> {
    if lambda == 0 {
        return Err(Error::arg("EDAtt needs lambda >= 1"));
    }
    if !(alpha > 0.0) {
        return Err(Error::arg(format!("EDAtt alpha must be positive, got {alpha}")));
    }
    if num_candidates > attn.num_targets() {
        return Err(Error::arg(format!(
            "{num_candidates} candidates but only {} attention rows",
            attn.num_targets()
        )));
    }
    let start = attn.num_frames().saturating_sub(lambda);
    let commit = (0..num_candidates)
        .take_while(|&i| {
            let recent: f64 = attn.row(i).iter().skip(start).sum();
            recent < alpha
        })
        .count();
    Ok(PolicyDecision::gated(commit, num_candidates, StopReason::Threshold))
}

/// Number of additional target words the wait-k schedule allows.
pub fn waitk_allowed(k: usize, source_words_detected: usize, target_words_emitted: usize) -> usize {
    (source_words_detected + 1)
        .saturating_sub(k)
        .saturating_sub(target_words_emitted)
}

/// Length of the longest common prefix of two sequences.
pub fn common_prefix_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Local Agreement over full hypotheses: commit whatever the previous and the
/// current hypothesis agree on beyond the `committed` tokens.
pub fn local_agreement_prefix<T: PartialEq>(
    previous: Option<&[T]>,
    current: &[T],
    committed: usize,
) -> PolicyDecision {
    let Some(previous) = previous else {
        return PolicyDecision { commit_count: 0, stopped_by: StopReason::Disagreement };
    };
    let lcp = common_prefix_len(previous, current);
    let commit_count = lcp.saturating_sub(committed);
    let stopped_by =
        if lcp < current.len() { StopReason::Disagreement } else { StopReason::Exhausted };
    PolicyDecision { commit_count, stopped_by }
}

/// Policy choice and its hyperparameters, fixed for a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PolicyConfig {
    #[serde(rename = "alignatt")]
    AlignAtt { f: usize },
    #[serde(rename = "edatt")]
    EdAtt {
        alpha: f64,
        #[serde(default = "default_lambda")]
        lambda: usize,
    },
    #[serde(rename = "waitk")]
    WaitK { k: usize },
    /// `ts_ms` is the speech segment length; it doubles as the read chunk.
    #[serde(rename = "local_agreement")]
    LocalAgreement {
        ts_ms: u32,
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_lambda() -> usize {
    DEFAULT_EDATT_LAMBDA
}

fn default_window() -> usize {
    DEFAULT_LA_WINDOW
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::AlignAtt { .. } => "alignatt",
            PolicyConfig::EdAtt { .. } => "edatt",
            PolicyConfig::WaitK { .. } => "waitk",
            PolicyConfig::LocalAgreement { .. } => "local_agreement",
        }
    }

    /// Whether the policy gates candidates with cross-attention.
    pub fn uses_attention(&self) -> bool {
        matches!(self, PolicyConfig::AlignAtt { .. } | PolicyConfig::EdAtt { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyConfig::AlignAtt { f } if f == 0 => Err(Error::arg("f must be >= 1")),
            PolicyConfig::EdAtt { alpha, lambda } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    Err(Error::arg(format!("alpha must lie in (0, 1], got {alpha}")))
                } else if lambda == 0 {
                    Err(Error::arg("lambda must be >= 1"))
                } else {
                    Ok(())
                }
            }
            PolicyConfig::WaitK { k } if k == 0 => Err(Error::arg("k must be >= 1")),
            PolicyConfig::LocalAgreement { ts_ms, window } => {
                if ts_ms == 0 {
                    Err(Error::arg("ts_ms must be positive"))
                } else if window < 2 {
                    Err(Error::arg("agreement window must be >= 2"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Per-session policy state. Committed tokens only grow.
#[derive(Debug, Clone)]
pub struct PolicyState {
    config: PolicyConfig,
    committed: Vec<u32>,
    committed_words: usize,
    // most recent last; holds at most window - 1 hypotheses
    history: Vec<Vec<u32>>,
}

impl PolicyState {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, committed: Vec::new(), committed_words: 0, history: Vec::new() })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    /// Word units committed so far (tracked for wait-k).
    pub fn committed_words(&self) -> usize {
        self.committed_words
    }

    pub fn commit(&mut self, tokens: &[u32], words: usize) {
        self.committed.extend_from_slice(tokens);
        self.committed_words += words;
    }

    /// Local Agreement step over the full current hypothesis (committed
    /// prefix included). Records the hypothesis for the next step.
    pub fn agree(&mut self, hypothesis: &[u32]) -> PolicyDecision {
        let window = match self.config {
            PolicyConfig::LocalAgreement { window, .. } => window,
            _ => DEFAULT_LA_WINDOW,
        };
        let decision = if self.history.len() + 1 < window {
            PolicyDecision { commit_count: 0, stopped_by: StopReason::Disagreement }
        } else {
            let agreed = self
                .history
                .iter()
                .map(|h| common_prefix_len(h, hypothesis))
                .min()
                .unwrap_or(hypothesis.len());
            let commit_count = agreed.saturating_sub(self.committed.len());
            let stopped_by = if agreed < hypothesis.len() {
                StopReason::Disagreement
            } else {
                StopReason::Exhausted
            };
            PolicyDecision { commit_count, stopped_by }
        };
        self.history.push(hypothesis.to_vec());
        if self.history.len() >= window {
            self.history.remove(0);
        }
        decision
    }
}
