//! Small deterministic encoder-decoder with fixed seeded weights.
//!
//! It stands in for a trained speech translation model so that every part of
//! the adapter contract can be exercised cheaply: multi-layer multi-head
//! cross-attention capture, end-of-sequence, word boundaries and a CTC head.
//!
//! The encoder mean-pools input frames by 4, projects them to `d_model`, adds
//! sinusoidal positions and applies causal residual layers, so states of
//! earlier frames never change as more audio arrives. The decoder is causal
//! too; its cross-attention scores carry a monotonic position prior, which
//! gives the attention a roughly diagonal source/target alignment, and its
//! end-of-sequence logit grows once the output passes the length expected
//! for the received source.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::{self, CTC_BLANK, CTC_BOUNDARY, CTC_CHAR};
use super::{reduced_length, Capabilities, DecodeResult, EncoderStates, ModelAdapter, Vocabulary, LENGTH_REDUCTION};
use crate::attn::{softmax_in_place, AttentionMatrix, AttentionTensor};
use crate::error::{Error, Result};

const ENCODER_MIX: f64 = 0.5;
const DIAG_GAIN: f64 = 1.5;
const EOS_GAIN: f64 = 2.5;
const REPEAT_PENALTY: f64 = 2.0;
const CTC_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Target tokens produced per encoder state.
    pub tokens_per_frame: f64,
    /// Encoder states per source word seen by the CTC head.
    pub frames_per_word: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            feature_dim: 80,
            d_model: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            tokens_per_frame: 0.2,
            frames_per_word: 8,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    wq: Vec<Array2<f64>>,
    wk: Vec<Array2<f64>>,
    wv: Vec<Array2<f64>>,
    wo: Array2<f64>,
    ff1: Array2<f64>,
    ff2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    caps: Capabilities,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    encoder: Vec<(Array2<f64>, Array1<f64>)>,
    embed: Array2<f64>,
    decoder: Vec<DecoderLayer>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    w_ctc: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (3.0 / rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, a: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.gen_range(-a..a))
}

/// Sinusoidal position encoding.
pub(crate) fn position_encoding(pos: usize, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |i| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn rms_norm(x: &mut Array1<f64>) {
    let rms = (x.mapv(|v| v * v).mean().unwrap_or(0.0) + 1e-6).sqrt();
    *x /= rms;
}

fn argmax(values: ArrayView1<'_, f64>, allowed: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if allowed(i) && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || config.d_model % config.heads != 0 {
            return Err(Error::arg("d_model must be a positive multiple of heads"));
        }
        if config.feature_dim == 0 || config.decoder_layers == 0 {
            return Err(Error::arg("feature_dim and decoder_layers must be positive"));
        }
        if !(config.tokens_per_frame > 0.0) || config.frames_per_word < 2 {
            return Err(Error::arg("tokens_per_frame must be positive and frames_per_word >= 2"));
        }
        let vocab = Vocabulary::toy();
        let (d, f, v) = (config.d_model, config.feature_dim, vocab.len());
        let dk = d / config.heads;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let w_in = uniform(&mut rng, f, d);
        let b_in = uniform_vec(&mut rng, d, 0.1);
        let encoder = (0..config.encoder_layers)
            .map(|_| (uniform(&mut rng, d, d), uniform_vec(&mut rng, d, 0.1)))
            .collect();
        let embed = uniform(&mut rng, v, d) * (v as f64 / 3.0).sqrt();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                wq: (0..config.heads).map(|_| uniform(&mut rng, d, dk)).collect(),
                wk: (0..config.heads).map(|_| uniform(&mut rng, d, dk)).collect(),
                wv: (0..config.heads).map(|_| uniform(&mut rng, d, dk)).collect(),
                wo: uniform(&mut rng, d, d),
                ff1: uniform(&mut rng, d, d),
                ff2: uniform(&mut rng, d, d),
            })
            .collect();
        let w_out = uniform(&mut rng, d, v) * 2.0;
        let b_out = uniform_vec(&mut rng, v, 0.5);
        let w_ctc = uniform(&mut rng, d, 3);

        let caps = Capabilities {
            num_layers: config.decoder_layers,
            num_heads: config.heads,
            feature_dim: f,
            vocab,
        };
        Ok(Self { config, caps, w_in, b_in, encoder, embed, decoder, w_out, b_out, w_ctc })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(ToyConfig { seed, ..ToyConfig::default() }).expect("default toy config is valid")
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn mean_pool(&self, features: ArrayView2<'_, f32>) -> Array2<f64> {
        let t = features.nrows();
        let n = reduced_length(t);
        let mut pooled = Array2::<f64>::zeros((n, features.ncols()));
        for (j, mut row) in pooled.axis_iter_mut(Axis(0)).enumerate() {
            let lo = j * LENGTH_REDUCTION;
            let hi = (lo + LENGTH_REDUCTION).min(t);
            for frame in features.slice(ndarray::s![lo..hi, ..]).axis_iter(Axis(0)) {
                row.zip_mut_with(&frame, |acc, &x| *acc += x as f64);
            }
            row /= (hi - lo) as f64;
        }
        pooled
    }

    fn check_features(&self, features: ArrayView2<'_, f32>) -> Result<()> {
        if features.nrows() == 0 {
            return Err(Error::arg("cannot encode an empty feature matrix"));
        }
        if features.ncols() != self.config.feature_dim {
            return Err(Error::dim(format!(
                "expected {} feature dims, got {}",
                self.config.feature_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    fn encode_states(&self, features: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let d = self.config.d_model;
        let mut h = self.mean_pool(features).dot(&self.w_in) + &self.b_in;
        for (j, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
            row += &position_encoding(j, d);
        }
        for (w, b) in &self.encoder {
            let u = (h.dot(w) + b).mapv(f64::tanh);
            h += &u;
            for j in 1..h.nrows() {
                let prev = u.row(j - 1);
                h.row_mut(j).scaled_add(ENCODER_MIX, &prev);
            }
        }
        Ok(h)
    }

    /// Score bias pulling target position `i` toward its expected frame.
    fn position_prior(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        let expected = (i as f64 + 0.5) / self.config.tokens_per_frame;
        let width = 2.0 + head as f64;
        let gain = DIAG_GAIN * (layer + 1) as f64 / self.config.decoder_layers as f64;
        let z = (j as f64 - expected) / width;
        -gain * z * z
    }

    /// Per-frame CTC label posteriors of the toy head.
    pub fn ctc_posteriors(&self, features: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
        let states = self.encode_states(features)?;
        let mut logits = states.dot(&self.w_ctc) * CTC_NOISE;
        let fpw = self.config.frames_per_word;
        for (j, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
            let phase = j % fpw;
            let label = if phase == fpw - 1 {
                CTC_BOUNDARY
            } else if (1..fpw / 2).contains(&phase) {
                CTC_CHAR
            } else {
                CTC_BLANK
            };
            row[label] += 3.0;
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        Ok(logits)
    }
}

struct HeadCache {
    keys: Array2<f64>,
    values: Array2<f64>,
}

impl ModelAdapter for ToyModel {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn encode(&self, features: ArrayView2<'_, f32>) -> Result<EncoderStates> {
        Ok(EncoderStates { states: self.encode_states(features)?, version: 0 })
    }

    fn decode_greedy(
        &self,
        enc: &EncoderStates,
        forced_prefix: &[u32],
        max_new: usize,
    ) -> Result<DecodeResult> {
        let vocab = &self.caps.vocab;
        let eos = vocab.eos();
        if max_new == 0 {
            return Err(Error::arg("max_new must be >= 1"));
        }
        if forced_prefix.contains(&eos) {
            return Err(Error::arg("forced prefix contains end-of-sequence"));
        }
        if let Some(&bad) = forced_prefix.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::UnknownToken(bad));
        }
        let n = enc.num_frames();
        if n == 0 {
            return Err(Error::arg("decoding over zero encoder states"));
        }
        if enc.states.ncols() != self.config.d_model {
            return Err(Error::dim("encoder states width differs from d_model"));
        }

        let (d, heads, layers) = (self.config.d_model, self.config.heads, self.config.decoder_layers);
        let dk = d / heads;
        let scale = (dk as f64).sqrt();
        let cache: Vec<HeadCache> = self
            .decoder
            .iter()
            .flat_map(|layer| {
                (0..heads).map(move |h| HeadCache {
                    keys: enc.states.dot(&layer.wk[h]),
                    values: enc.states.dot(&layer.wv[h]),
                })
            })
            .collect();

        let expected_len = n as f64 * self.config.tokens_per_frame;
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); layers * heads];
        let mut sequence: Vec<u32> = forced_prefix.to_vec();
        let mut emb_sum = Array1::<f64>::zeros(d);
        let mut eos_reached = false;
        let limit = forced_prefix.len() + max_new;

        for i in 0..limit {
            let input = if i == 0 { eos } else { sequence[i - 1] };
            let emb = self.embed.row(input as usize);
            emb_sum += &emb;
            let mut x = &emb + &(&emb_sum / (i + 1) as f64) + position_encoding(i, d) * 0.5;
            rms_norm(&mut x);

            let mut step_rows = Vec::with_capacity(layers * heads);
            for (l, layer) in self.decoder.iter().enumerate() {
                let mut concat = Array1::<f64>::zeros(d);
                for h in 0..heads {
                    let hc = &cache[l * heads + h];
                    let q = x.dot(&layer.wq[h]);
                    let mut scores: Vec<f64> = (0..n)
                        .map(|j| q.dot(&hc.keys.row(j)) / scale + self.position_prior(l, h, i, j))
                        .collect();
                    softmax_in_place(&mut scores);
                    let ctx = Array1::from(scores.clone()).dot(&hc.values);
                    concat.slice_mut(ndarray::s![h * dk..(h + 1) * dk]).assign(&ctx);
                    step_rows.push(scores);
                }
                x = x + concat.dot(&layer.wo);
                rms_norm(&mut x);
                x = &x + &x.dot(&layer.ff1).mapv(f64::tanh).dot(&layer.ff2);
                rms_norm(&mut x);
            }

            if i >= forced_prefix.len() {
                let mut logits = x.dot(&self.w_out) + &self.b_out;
                logits[eos as usize] += EOS_GAIN * (i as f64 + 1.0 - expected_len);
                if i > 0 && input != eos {
                    logits[input as usize] -= REPEAT_PENALTY;
                }
                let next = if i == 0 {
                    argmax(logits.view(), |t| vocab.is_word_start(t as u32))
                } else {
                    argmax(logits.view(), |_| true)
                } as u32;
                if next == eos {
                    eos_reached = true;
                    break;
                }
                sequence.push(next);
            }
            for (acc, r) in rows.iter_mut().zip(step_rows) {
                acc.extend(r);
            }
        }

        let m = sequence.len();
        let matrices = rows
            .into_iter()
            .map(|flat| {
                AttentionMatrix::new_unchecked(
                    Array2::from_shape_vec((m, n), flat).expect("one row per decoded position"),
                )
            })
            .collect();
        let attention = AttentionTensor::new(layers, heads, matrices)?;
        Ok(DecodeResult { tokens: sequence[forced_prefix.len()..].to_vec(), attention, eos_reached })
    }

    fn count_source_words(&self, features: ArrayView2<'_, f32>) -> Result<usize> {
        Ok(ctc::count_words_from_posteriors(self.ctc_posteriors(features)?.view()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::ROW_SUM_TOLERANCE;
    use approx::assert_abs_diff_eq;

    fn features(t: usize, f: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, f), || rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn encoder_length_reduction() {
        let m = ToyModel::with_seed(1);
        assert_eq!(m.encode(features(8, 80, 0).view()).unwrap().num_frames(), 2);
        assert_eq!(m.encode(features(9, 80, 0).view()).unwrap().num_frames(), 3);
        assert!(m.encode(Array2::<f32>::zeros((0, 80)).view()).is_err());
        assert!(matches!(m.encode(features(4, 79, 0).view()), Err(Error::Dimension(_))));
    }

    /// Straightforward scalar re-derivation of the encoder, loop by loop.
    fn scalar_encoder(m: &ToyModel, x: &Array2<f32>) -> Vec<Vec<f64>> {
        let (t, f, d) = (x.nrows(), x.ncols(), m.config.d_model);
        let n = t.div_ceil(4);
        let mut h = vec![vec![0.0; d]; n];
        for j in 0..n {
            let lo = 4 * j;
            let hi = (lo + 4).min(t);
            let mut pooled = vec![0.0; f];
            for r in lo..hi {
                for c in 0..f {
                    pooled[c] += x[[r, c]] as f64;
                }
            }
            for p in pooled.iter_mut() {
                *p /= (hi - lo) as f64;
            }
            for k in 0..d {
                let mut acc = m.b_in[k];
                for c in 0..f {
                    acc += pooled[c] * m.w_in[[c, k]];
                }
                let angle = j as f64 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
                acc += if k % 2 == 0 { angle.sin() } else { angle.cos() };
                h[j][k] = acc;
            }
        }
        for (w, b) in &m.encoder {
            let mut u = vec![vec![0.0; d]; n];
            for j in 0..n {
                for k in 0..d {
                    let mut acc = b[k];
                    for c in 0..d {
                        acc += h[j][c] * w[[c, k]];
                    }
                    u[j][k] = acc.tanh();
                }
            }
            for j in 0..n {
                for k in 0..d {
                    h[j][k] += u[j][k];
                    if j > 0 {
                        h[j][k] += 0.5 * u[j - 1][k];
                    }
                }
            }
        }
        h
    }

    #[test]
    fn encoder_matches_scalar_reference_on_ones() {
        let m = ToyModel::with_seed(7);
        let x = Array2::<f32>::ones((12, 80));
        let enc = m.encode(x.view()).unwrap();
        let reference = scalar_encoder(&m, &x);
        assert_eq!(enc.num_frames(), 3);
        for j in 0..3 {
            for k in 0..32 {
                assert_abs_diff_eq!(enc.states[[j, k]], reference[j][k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn encoder_is_causal_and_monotone() {
        let m = ToyModel::with_seed(3);
        let x = features(40, 80, 9);
        let short = m.encode(x.slice(ndarray::s![..20, ..])).unwrap();
        let long = m.encode(x.view()).unwrap();
        assert!(long.num_frames() >= short.num_frames());
        for j in 0..short.num_frames() {
            for k in 0..32 {
                assert_abs_diff_eq!(short.states[[j, k]], long.states[[j, k]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn decode_respects_cap_and_rejects_eos_prefix() {
        let m = ToyModel::with_seed(7);
        let enc = m.encode(features(200, 80, 1).view()).unwrap();
        let r = m.decode_greedy(&enc, &[], 1).unwrap();
        assert!(r.tokens.len() <= 1);
        assert_eq!(r.attention.shape(), (r.tokens.len(), enc.num_frames()));
        assert!(m.decode_greedy(&enc, &[3, 0], 4).is_err());
        assert!(m.decode_greedy(&enc, &[], 0).is_err());
        assert!(matches!(m.decode_greedy(&enc, &[99], 4), Err(Error::UnknownToken(99))));
    }

    #[test]
    fn decode_golden_sequence() {
        let m = ToyModel::with_seed(7);
        let enc = m.encode(features(200, 80, 1).view()).unwrap();
        let r = m.decode_greedy(&enc, &[], 128).unwrap();
        assert!(r.eos_reached);
        let again = m.decode_greedy(&enc, &[], 128).unwrap();
        assert_eq!(r, again);
        assert_eq!(r.tokens, GOLDEN_TOKENS);
    }

    // first verified run of seed 7 over 200 seeded random frames
    const GOLDEN_TOKENS: &[u32] = &[20, 31, 41, 11, 24, 20, 51, 19, 31, 19, 31, 19];

    #[test]
    fn forced_prefix_reproduces_rows_and_continuation() {
        let m = ToyModel::with_seed(11);
        let enc = m.encode(features(160, 80, 4).view()).unwrap();
        let full = m.decode_greedy(&enc, &[], 128).unwrap();
        assert!(full.tokens.len() > 3);
        let forced = m.decode_greedy(&enc, &full.tokens[..3], 128).unwrap();
        assert_eq!(forced.tokens, full.tokens[3..]);
        assert_eq!(forced.eos_reached, full.eos_reached);
        for l in 0..2 {
            for h in 0..4 {
                let a = full.attention.get(l, h).unwrap();
                let b = forced.attention.get(l, h).unwrap();
                assert_eq!(a.weights(), b.weights());
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = ToyModel::with_seed(5);
        let enc = m.encode(features(90, 80, 2).view()).unwrap();
        let r = m.decode_greedy(&enc, &[], 64).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                let a = r.attention.get(l, h).unwrap();
                assert!(AttentionMatrix::new(a.weights().to_owned()).is_ok());
                for row in a.weights().axis_iter(Axis(0)) {
                    assert!((row.sum() - 1.0).abs() < ROW_SUM_TOLERANCE);
                }
            }
        }
    }

    #[test]
    fn first_token_starts_a_word() {
        for seed in 0..10 {
            let m = ToyModel::with_seed(seed);
            let enc = m.encode(features(100, 80, seed).view()).unwrap();
            let r = m.decode_greedy(&enc, &[], 8).unwrap();
            if let Some(&t) = r.tokens.first() {
                assert!(m.capabilities().vocab.is_word_start(t));
            }
        }
    }

    #[test]
    fn output_length_tracks_source_length() {
        let m = ToyModel::with_seed(7);
        let x = features(400, 80, 8);
        let short = m.decode_greedy(&m.encode(x.slice(ndarray::s![..100, ..])).unwrap(), &[], 128).unwrap();
        let long = m.decode_greedy(&m.encode(x.view()).unwrap(), &[], 128).unwrap();
        assert!(short.tokens.len() < long.tokens.len());
    }

    #[test]
    fn ctc_word_count_grows_with_input() {
        let m = ToyModel::with_seed(7);
        let x = features(400, 80, 3);
        let mut last = 0;
        for t in (4..=400).step_by(4) {
            let c = m.count_source_words(x.slice(ndarray::s![..t, ..])).unwrap();
            assert!(c >= last);
            last = c;
        }
        assert!(last >= 10, "expected about one word per 32 frames, got {last}");
    }

    #[test]
    fn six_layer_eight_head_variant() {
        let m = ToyModel::new(ToyConfig { decoder_layers: 6, heads: 8, ..ToyConfig::default() }).unwrap();
        let enc = m.encode(features(100, 80, 2).view()).unwrap();
        let r = m.decode_greedy(&enc, &[], 16).unwrap();
        assert_eq!(r.attention.num_layers(), 6);
        assert_eq!(r.attention.num_heads(), 8);
    }
}
