//! Latency and quality scores computed from emission logs.
//!
//! Latency follows Average Lagging and its length-adaptive variant, measured
//! over detokenized output words. Quality is BLEU with 13a tokenization and
//! exponential smoothing, compatible with the common reference scorer.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WORD_MARK;
use crate::simulator::EmissionLog;

pub const MAX_NGRAM: usize = 4;

/// Per-word delays of a log, each taken from the event that completed the word.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WordDelays {
    pub ideal_s: Vec<f64>,
    pub wall_s: Vec<f64>,
}

pub fn word_delays(log: &EmissionLog) -> WordDelays {
    let mut out = WordDelays::default();
    let mut pending_break = true;
    for e in &log.events {
        for c in e.text.chars() {
            if c == WORD_MARK || c.is_whitespace() {
                pending_break = true;
            } else if pending_break || out.ideal_s.is_empty() {
                out.ideal_s.push(e.ideal_s);
                out.wall_s.push(e.wall_s);
                pending_break = false;
            } else {
                *out.ideal_s.last_mut().unwrap() = e.ideal_s;
                *out.wall_s.last_mut().unwrap() = e.wall_s;
            }
        }
    }
    out
}

/// Number of leading delays that enter the average: up to and including the
/// first delay at or past the end of the source, or all of them.
pub fn lagging_cutoff(delays_s: &[f64], source_duration_s: f64) -> usize {
    delays_s
        .iter()
        .position(|&d| d >= source_duration_s)
        .map_or(delays_s.len(), |i| i + 1)
}

fn lagging(delays_s: &[f64], tau: usize, source_duration_s: f64, oracle_len: usize) -> f64 {
    let rate = source_duration_s / oracle_len as f64;
    let sum: f64 = delays_s[..tau].iter().enumerate().map(|(i, d)| d - i as f64 * rate).sum();
    sum / tau as f64
}

fn check_lagging_args(delays_s: &[f64], source_duration_s: f64, ref_len: usize) -> Result<()> {
    if delays_s.is_empty() {
        return Err(Error::EmptyHypothesis);
    }
    if !(source_duration_s > 0.0) {
        return Err(Error::arg("source duration must be positive"));
    }
    if ref_len == 0 {
        return Err(Error::arg("reference must have at least one word"));
    }
    Ok(())
}

/// Length-adaptive average lagging; the oracle rate uses the longer of
/// hypothesis and reference.
pub fn laal(delays_s: &[f64], source_duration_s: f64, ref_len: usize) -> Result<f64> {
    check_lagging_args(delays_s, source_duration_s, ref_len)?;
    let tau = lagging_cutoff(delays_s, source_duration_s);
    Ok(lagging(delays_s, tau, source_duration_s, ref_len.max(delays_s.len())))
}

/// Average lagging; the oracle rate uses the reference length alone.
pub fn al(delays_s: &[f64], source_duration_s: f64, ref_len: usize) -> Result<f64> {
    check_lagging_args(delays_s, source_duration_s, ref_len)?;
    let tau = lagging_cutoff(delays_s, source_duration_s);
    Ok(lagging(delays_s, tau, source_duration_s, ref_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub al_s: f64,
    pub laal_s: f64,
    pub al_ca_s: f64,
    pub laal_ca_s: f64,
    pub delays_s: Vec<f64>,
    pub delays_ca_s: Vec<f64>,
    pub tau: usize,
}

/// Scores a log against a reference of `ref_len` words.
///
/// The cutoff is taken from the ideal delays and reused for the
/// computation-aware scores, so both average the same words.
pub fn latency(log: &EmissionLog, ref_len: usize) -> Result<LatencyReport> {
    let d = word_delays(log);
    let t = log.source_duration_s;
    check_lagging_args(&d.ideal_s, t, ref_len)?;
    let tau = lagging_cutoff(&d.ideal_s, t);
    let long = ref_len.max(d.ideal_s.len());
    Ok(LatencyReport {
        al_s: lagging(&d.ideal_s, tau, t, ref_len),
        laal_s: lagging(&d.ideal_s, tau, t, long),
        al_ca_s: lagging(&d.wall_s, tau, t, ref_len),
        laal_ca_s: lagging(&d.wall_s, tau, t, long),
        delays_s: d.ideal_s,
        delays_ca_s: d.wall_s,
        tau,
    })
}

static PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([\{-~\[-`\x20-&\(-\+:-@/])").unwrap());
static PERIOD_COMMA_AFTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([\.,])").unwrap());
static PERIOD_COMMA_BEFORE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\.,])([^0-9])").unwrap());
static DASH_AFTER_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").unwrap());

/// 13a tokenization.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let s = PUNCT.replace_all(&s, " $1 ");
    let s = PERIOD_COMMA_AFTER.replace_all(&s, "$1 $2 ");
    let s = PERIOD_COMMA_BEFORE.replace_all(&s, " $1 $2");
    let s = DASH_AFTER_DIGIT.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String]) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for n in 1..=MAX_NGRAM {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics for BLEU, summable over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_NGRAM],
    pub totals: [usize; MAX_NGRAM],
    pub sys_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Statistics of one segment against one or more references; counts are
    /// clipped by the maximum over references and the reference length is
    /// the closest one, shorter on ties.
    pub fn segment(hypothesis: &str, references: &[&str]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::arg("at least one reference is required"));
        }
        let hyp = tokenize_13a(hypothesis);
        let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
        let mut ref_len = None::<usize>;
        for r in references {
            let toks = tokenize_13a(r);
            let len = toks.len();
            ref_len = Some(match ref_len {
                None => len,
                Some(best) => {
                    let (db, dl) = (best.abs_diff(hyp.len()), len.abs_diff(hyp.len()));
                    if dl < db || (dl == db && len < best) { len } else { best }
                }
            });
            for (g, c) in ngram_counts(&toks) {
                let e = max_ref.entry(g.to_vec()).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let mut stats = BleuStats { sys_len: hyp.len(), ref_len: ref_len.unwrap(), ..Default::default() };
        for n in 1..=MAX_NGRAM {
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        for (g, c) in ngram_counts(&hyp) {
            let clip = max_ref.get(g).copied().unwrap_or(0);
            stats.matches[g.len() - 1] += c.min(clip);
        }
        Ok(stats)
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_NGRAM {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.sys_len += other.sys_len;
        self.ref_len += other.ref_len;
    }

    /// Scores the statistics. With `effective_order`, orders the hypothesis
    /// is too short to contain are left out of the mean.
    pub fn score(&self, effective_order: bool) -> QualityReport {
        let mut precisions = [0.0; MAX_NGRAM];
        let brevity_penalty = if self.sys_len == 0 {
            0.0
        } else if self.sys_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
        } else {
            1.0
        };
        let report = |bleu, precisions| QualityReport {
            bleu,
            precisions,
            brevity_penalty,
            sys_len: self.sys_len,
            ref_len: self.ref_len,
        };
        if self.sys_len == 0 || self.matches[0] == 0 {
            return report(0.0, precisions);
        }
        let mut order = MAX_NGRAM;
        let mut smooth = 1.0;
        for n in 0..MAX_NGRAM {
            if self.totals[n] == 0 {
                break;
            }
            if effective_order {
                order = n + 1;
            }
            precisions[n] = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        if precisions[..order].iter().any(|&p| p == 0.0) {
            return report(0.0, precisions);
        }
        let log_mean = precisions[..order].iter().map(|p| p.ln()).sum::<f64>() / order as f64;
        report(brevity_penalty * log_mean.exp(), precisions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Percent, after smoothing.
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
}

/// Sentence-level BLEU.
pub fn bleu(hypothesis: &str, reference: &str) -> Result<QualityReport> {
    if reference.trim().is_empty() {
        return Err(Error::arg("reference is empty"));
    }
    Ok(BleuStats::segment(hypothesis, &[reference])?.score(true))
}

/// Corpus-level BLEU over aligned hypothesis/reference pairs.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<QualityReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::dim(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::segment(h.as_ref(), &[r.as_ref()])?);
    }
    Ok(total.score(false))
}

/// Words in a reference as counted for latency.
pub fn reference_length(reference: &str) -> usize {
    reference.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::EmissionEvent;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ev(text: &str, ideal_s: f64, wall_s: f64) -> EmissionEvent {
        EmissionEvent { token: 0, text: text.into(), ideal_s, wall_s }
    }

    fn log_of(events: Vec<EmissionEvent>, t: f64) -> EmissionLog {
        EmissionLog { events, source_duration_s: t, final_text: String::new() }
    }

    #[test]
    fn word_delay_examples() {
        let one = log_of(vec![ev("▁hallo", 2.0, 2.1)], 2.0);
        assert_eq!(word_delays(&one).ideal_s, vec![2.0]);
        let two = log_of(vec![ev("▁ich", 1.0, 1.2), ev("▁bin", 2.0, 2.4)], 2.0);
        assert_eq!(word_delays(&two).ideal_s, vec![1.0, 2.0]);
        assert_eq!(word_delays(&two).wall_s, vec![1.2, 2.4]);
        let split = log_of(vec![ev("▁sp", 0.5, 0.6), ev("rechen", 1.0, 1.1)], 2.0);
        assert_eq!(word_delays(&split).ideal_s, vec![1.0]);
        let bare = log_of(vec![ev("▁a", 0.5, 0.5), ev("▁", 1.0, 1.0), ev("b", 1.5, 1.5)], 2.0);
        assert_eq!(word_delays(&bare).ideal_s, vec![0.5, 1.5]);
    }

    #[test]
    fn lagging_worked_examples() {
        assert_abs_diff_eq!(laal(&[2.0], 2.0, 1).unwrap(), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(laal(&[1.0, 2.0], 2.0, 2).unwrap(), 1.0, epsilon = 1e-9);
        let over = [0.5, 1.0, 1.5, 2.0];
        assert_abs_diff_eq!(laal(&over, 2.0, 2).unwrap(), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(al(&over, 2.0, 2).unwrap(), -0.25, epsilon = 1e-9);
    }

    #[test]
    fn lagging_errors() {
        assert!(matches!(laal(&[], 2.0, 3), Err(Error::EmptyHypothesis)));
        assert!(matches!(al(&[], 2.0, 3), Err(Error::EmptyHypothesis)));
        assert!(laal(&[1.0], 0.0, 3).is_err());
        assert!(laal(&[1.0], 1.0, 0).is_err());
    }

    #[test]
    fn cutoff_includes_first_late_word() {
        assert_eq!(lagging_cutoff(&[0.5, 2.0, 2.0], 2.0), 2);
        assert_eq!(lagging_cutoff(&[0.5, 1.0], 2.0), 2);
        // the word after the cutoff does not count
        assert_abs_diff_eq!(laal(&[1.0, 3.0, 9.0], 2.0, 3).unwrap(), (1.0 + 3.0 - 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn latency_report_from_log() {
        let log = log_of(
            vec![ev("▁a", 0.5, 0.6), ev("▁b", 1.0, 1.3), ev("▁c", 1.5, 1.7), ev("▁d", 2.0, 2.5)],
            2.0,
        );
        let r = latency(&log, 2).unwrap();
        assert_eq!(r.tau, 4);
        assert_abs_diff_eq!(r.laal_s, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.al_s, -0.25, epsilon = 1e-12);
        // wall delays exceed ideal by 0.1, 0.3, 0.2, 0.5
        assert_abs_diff_eq!(r.laal_ca_s, 0.5 + 1.1 / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.al_ca_s, -0.25 + 1.1 / 4.0, epsilon = 1e-12);
        assert!(matches!(latency(&log_of(vec![], 2.0), 2), Err(Error::EmptyHypothesis)));
    }

    #[test]
    fn tokenizer_13a() {
        assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize_13a("It costs $3.50, ok."), ["It", "costs", "$", "3.50", ",", "ok", "."]);
        assert_eq!(tokenize_13a("1,000 and 5-6"), ["1,000", "and", "5", "-", "6"]);
        assert_eq!(tokenize_13a("don't &quot;go&quot;"), ["don't", "\"", "go", "\""]);
        assert_eq!(tokenize_13a("e-mail (x)"), ["e-mail", "(", "x", ")"]);
    }

    #[test]
    fn bleu_examples() {
        let same = bleu("the cat sat on the mat", "the cat sat on the mat").unwrap();
        assert_abs_diff_eq!(same.bleu, 100.0, epsilon = 1e-9);

        let disjoint = bleu("a b c d", "w x y z").unwrap();
        assert_eq!(disjoint.bleu, 0.0);
        assert_eq!(disjoint.precisions, [0.0; 4]);

        // unigrams 3/3, bigrams 2/2, trigrams 1/1, no 4-grams to score
        let short = bleu("the cat sat", "the cat sat down").unwrap();
        let hand = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        assert_abs_diff_eq!(short.bleu, hand, epsilon = 1e-9);
        assert_abs_diff_eq!(short.bleu, 71.653_131_057_378_96, epsilon = 1e-9);
        assert_abs_diff_eq!(short.brevity_penalty, (1.0f64 - 4.0 / 3.0).exp(), epsilon = 1e-12);

        assert_eq!(bleu("", "the cat").unwrap().bleu, 0.0);
        assert_eq!(bleu("", "the cat").unwrap().brevity_penalty, 0.0);
        assert!(bleu("x", "  ").is_err());
    }

    #[test]
    fn bleu_matches_reference_scorer() {
        // values produced by sacreBLEU 2.6.0 with default settings
        let s = bleu("the quick brown fox jumps over the dog", "the quick brown fox jumped over the lazy dog").unwrap();
        assert_abs_diff_eq!(s.bleu, 37.707_945_965_932_07, epsilon = 1e-6);
        let c = corpus_bleu(
            &["the quick brown fox jumps over the dog", "Hello, world!", "a b c"],
            &["the quick brown fox jumped over the lazy dog", "Hello world!", "a b d"],
        )
        .unwrap();
        assert_abs_diff_eq!(c.bleu, 34.887_837_979_736_86, epsilon = 1e-6);
        let smoothed = bleu("one two three four five", "one two three five four").unwrap();
        assert_abs_diff_eq!(smoothed.bleu, 45.180_100_180_492_246, epsilon = 1e-6);
    }

    #[test]
    fn identical_references_are_interchangeable() {
        let h = "we will talk about climate today";
        let a = BleuStats::segment(h, &["today we talk about the climate", "today we talk about the climate"]).unwrap();
        let b = BleuStats::segment(h, &["today we talk about the climate"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_length_mismatch_is_an_error() {
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    fn delays_strategy() -> impl Strategy<Value = (Vec<f64>, f64, usize)> {
        (1usize..30, 0.5f64..20.0, 1usize..30).prop_flat_map(|(len, t, r)| {
            (prop::collection::vec(0.0..t * 1.2, len), Just(t), Just(r)).prop_map(|(mut d, t, r)| {
                d.sort_by(f64::total_cmp);
                (d, t, r)
            })
        })
    }

    proptest! {
        #[test]
        fn laal_dominates_al((d, t, r) in delays_strategy()) {
            let a = al(&d, t, r).unwrap();
            let l = laal(&d, t, r).unwrap();
            prop_assert!(l >= a - 1e-12);
            if d.len() <= r {
                prop_assert_eq!(l, a);
            }
        }

        #[test]
        fn laal_shifts_with_delays((d, t, r) in delays_strategy(), c in 0.0f64..5.0) {
            let base = laal(&d, t, r).unwrap();
            // keep every word before the cutoff so tau stays at hyp_len
            let t_big = d.last().unwrap() + c + 1.0;
            let base_big = laal(&d, t_big, r).unwrap();
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            prop_assert!((laal(&shifted, t_big, r).unwrap() - base_big - c).abs() < 1e-9);
            prop_assert!(base.is_finite());
        }

        #[test]
        fn laal_monotone_in_single_delay((d, t, r) in delays_strategy(), idx in 0usize..30, bump in 0.0f64..1.0) {
            let i = idx % d.len();
            let tau = lagging_cutoff(&d, t);
            let mut e = d.clone();
            e[i] += bump;
            prop_assume!(lagging_cutoff(&e, t) == tau);
            prop_assert!(laal(&e, t, r).unwrap() >= laal(&d, t, r).unwrap() - 1e-12);
        }

        #[test]
        fn bleu_identity_and_range(words in prop::collection::vec("[a-z]{1,6}", 1..20), other in prop::collection::vec("[a-z]{1,6}", 1..20)) {
            let h = words.join(" ");
            prop_assert!((bleu(&h, &h).unwrap().bleu - 100.0).abs() < 1e-9);
            let r = other.join(" ");
            let q = bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&q.bleu));
            if q.bleu > 0.0 {
                let order = q.precisions.iter().take_while(|&&p| p > 0.0).count().max(1);
                let mean = q.precisions[..order].iter().map(|p| p.ln()).sum::<f64>() / order as f64;
                prop_assert!((q.bleu - q.brevity_penalty * mean.exp()).abs() < 1e-9);
            }
        }
    }
}
