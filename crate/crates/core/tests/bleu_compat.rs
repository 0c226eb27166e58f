//! BLEU and 13a tokenization against scores recorded from the reference scorer.

use serde_json::Value;
use simulst_core::metrics::{bleu, corpus_bleu, tokenize_13a};

fn fixture() -> Value {
    let text = include_str!("fixtures/bleu_reference.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn segment_scores_match_recorded_values() {
    let f = fixture();
    for case in f["segments"].as_array().unwrap() {
        let h = case["hyp"].as_str().unwrap();
        let r = case["ref"].as_str().unwrap();
        let want = case["sentence_bleu"].as_f64().unwrap();
        let got = bleu(h, r).unwrap().bleu;
        assert!((got - want).abs() < 1e-6, "{h:?} vs {r:?}: {got} != {want}");
        let toks: Vec<String> = serde_json::from_value(case["tokens"].clone()).unwrap();
        assert_eq!(tokenize_13a(h), toks, "{h:?}");
    }
}

#[test]
fn corpus_score_matches_recorded_value() {
    let f = fixture();
    let segs = f["segments"].as_array().unwrap();
    let hyps: Vec<&str> = segs.iter().map(|c| c["hyp"].as_str().unwrap()).collect();
    let refs: Vec<&str> = segs.iter().map(|c| c["ref"].as_str().unwrap()).collect();
    let got = corpus_bleu(&hyps, &refs).unwrap().bleu;
    assert!((got - f["corpus_bleu"].as_f64().unwrap()).abs() < 1e-6, "{got}");
}
