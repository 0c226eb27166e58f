//! Greedy CTC decoding used for source word detection.

use ndarray::{ArrayView2, Axis};

pub const CTC_BLANK: usize = 0;
pub const CTC_CHAR: usize = 1;
pub const CTC_BOUNDARY: usize = 2;

/// Per-frame argmax label, ties to the lowest label.
pub fn greedy_labels(posteriors: ArrayView2<'_, f64>) -> Vec<usize> {
    posteriors
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (l, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Collapses repeats, then drops blanks.
pub fn collapse(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Completed words: a word counts once its boundary symbol has been seen.
pub fn count_words(labels: &[usize], blank: usize, boundary: usize) -> usize {
    collapse(labels, blank).iter().filter(|&&l| l == boundary).count()
}

pub fn count_words_from_posteriors(posteriors: ArrayView2<'_, f64>) -> usize {
    count_words(&greedy_labels(posteriors), CTC_BLANK, CTC_BOUNDARY)
}
