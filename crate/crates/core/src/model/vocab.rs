use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marks a piece that starts a new word (SentencePiece convention).
pub const WORD_MARK: char = '▁';

/// Subword vocabulary with an end-of-sequence id and `▁` word boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabSpec", into = "VocabSpec")]
pub struct Vocabulary {
    pieces: Vec<String>,
    eos: u32,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabSpec {
    pieces: Vec<String>,
    eos: u32,
}

impl TryFrom<VocabSpec> for Vocabulary {
    type Error = Error;

    fn try_from(spec: VocabSpec) -> Result<Self> {
        Vocabulary::new(spec.pieces, spec.eos)
    }
}

impl From<Vocabulary> for VocabSpec {
    fn from(v: Vocabulary) -> Self {
        VocabSpec { pieces: v.pieces, eos: v.eos }
    }
}

impl Vocabulary {
    pub fn new(pieces: Vec<String>, eos: u32) -> Result<Self> {
        if eos as usize >= pieces.len() {
            return Err(Error::arg(format!("eos id {eos} outside vocabulary of {}", pieces.len())));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (id, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), id as u32).is_some() {
                return Err(Error::arg(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self { pieces, eos, index })
    }

    /// The 64-piece vocabulary of the toy model: end-of-sequence, 26
    /// single-letter word starts, 26 letter continuations, 11 bigrams.
    pub fn toy() -> Self {
        let mut pieces = vec!["</s>".to_string()];
        pieces.extend(('a'..='z').map(|c| format!("{WORD_MARK}{c}")));
        pieces.extend(('a'..='z').map(|c| c.to_string()));
        for bigram in ["er", "en", "in", "an", "on", "st", "ch", "te", "re", "de", "ng"] {
            pieces.push(bigram.to_string());
        }
        Self::new(pieces, 0).expect("toy vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn piece(&self, id: u32) -> Result<&str> {
        self.pieces.get(id as usize).map(String::as_str).ok_or(Error::UnknownToken(id))
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn is_word_start(&self, id: u32) -> bool {
        self.pieces.get(id as usize).is_some_and(|p| p.starts_with(WORD_MARK))
    }

    /// Greedy longest-match segmentation of whitespace-separated words.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        let max_len = self.pieces.iter().map(|p| p.chars().count()).max().unwrap_or(0);
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = std::iter::once(WORD_MARK).chain(word.chars()).collect();
            let mut pos = 0;
            while pos < chars.len() {
                let found = (pos + 1..=chars.len().min(pos + max_len)).rev().find_map(|end| {
                    let cand: String = chars[pos..end].iter().collect();
                    self.id(&cand).map(|id| (id, end))
                });
                let (id, end) = found.ok_or_else(|| {
                    Error::arg(format!("cannot segment {word:?} with this vocabulary"))
                })?;
                out.push(id);
                pos = end;
            }
        }
        Ok(out)
    }

    /// Joins pieces, turning word marks into spaces. End-of-sequence is skipped.
    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &t in tokens {
            if t == self.eos {
                continue;
            }
            s.push_str(self.piece(t)?);
        }
        Ok(s.replace(WORD_MARK, " ").split_whitespace().collect::<Vec<_>>().join(" "))
    }

    /// Splits a token sequence into word units: a unit starts at every word
    /// mark and at position 0. Returns the exclusive end index of each unit.
    pub fn word_ends(&self, tokens: &[u32]) -> Vec<usize> {
        let mut ends = Vec::new();
        for i in 1..tokens.len() {
            if self.is_word_start(tokens[i]) {
                ends.push(i);
            }
        }
        if !tokens.is_empty() {
            ends.push(tokens.len());
        }
        ends
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_layout() {
        let v = Vocabulary::toy();
        assert_eq!(v.len(), 64);
        assert_eq!(v.eos(), 0);
        assert!(v.is_word_start(1));
        assert!(!v.is_word_start(27));
        assert!(!v.is_word_start(0));
    }

    #[test]
    fn detokenize_word_marks() {
        let v = Vocabulary::new(
            ["</s>", "▁Ich", "▁werde", "▁heu", "te"].iter().map(|s| s.to_string()).collect(),
            0,
        )
        .unwrap();
        assert_eq!(v.detokenize(&[1, 2, 3, 4]).unwrap(), "Ich werde heute");
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        assert!(matches!(v.detokenize(&[9]), Err(Error::UnknownToken(9))));
    }

    #[test]
    fn toy_round_trip() {
        let v = Vocabulary::toy();
        let ids = v.encode_text("a b c").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids).unwrap(), "a b c");
        let ids = v.encode_text("stern tide").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "stern tide");
        assert!(v.encode_text("Ünï").is_err());
    }

    #[test]
    fn word_units() {
        let v = Vocabulary::toy();
        let t = v.encode_text("ab c de").unwrap();
        // ▁a b | ▁c | ▁d e
        assert_eq!(v.word_ends(&t), vec![2, 3, 5]);
        // leading continuation forms its own unit
        assert_eq!(v.word_ends(&[27, 1]), vec![1, 2]);
        assert!(v.word_ends(&[]).is_empty());
    }

    #[test]
    fn rejects_duplicates_and_bad_eos() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], 0).is_err());
        assert!(Vocabulary::new(vec!["a".into()], 1).is_err());
    }
}
