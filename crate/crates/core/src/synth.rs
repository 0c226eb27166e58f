//! Seeded synthetic evaluation suite.
//!
//! Each utterance is a run of harmonic tone bursts separated by short
//! pauses, one burst per "word". Features are stored unnormalized next to a
//! global CMVN file fitted on the whole suite. References are the toy
//! model's offline greedy output over the normalized full source, so BLEU
//! measures how far a streaming policy drifts from offline decoding.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ingestion::{from_pcm16, global_cmvn, logmel, to_pcm16, write_features, write_wav, CmvnStats, FeatureMatrix, Manifest, ManifestEntry};
use crate::model::{ModelAdapter, ToyConfig, ToyModel};
use crate::simulator::DEFAULT_MAX_NEW;

pub const SAMPLE_RATE: u32 = 16_000;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CMVN_FILE: &str = "cmvn.json";

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub utterances: usize,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
    /// Also keep the waveforms under `audio/`.
    pub write_audio: bool,
    pub model: ToyConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { utterances: 20, seed: 2024, min_words: 3, max_words: 9, write_audio: false, model: ToyConfig::default() }
    }
}

pub struct Suite {
    pub manifest_path: PathBuf,
    pub cmvn_path: PathBuf,
    pub manifest: Manifest,
}

fn tone_burst(rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let len = (rng.gen_range(0.25..0.55) * SAMPLE_RATE as f64) as usize;
    let f0 = rng.gen_range(150.0..1200.0);
    let glide = rng.gen_range(-0.3..0.3);
    let amp = rng.gen_range(0.2..0.6);
    let mut phase = 0.0f64;
    for i in 0..len {
        let pos = i as f64 / len as f64;
        let env = (PI * pos).sin().powf(0.5);
        let f = f0 * (1.0 + glide * pos);
        phase += 2.0 * PI * f / SAMPLE_RATE as f64;
        let s = (1..=3).map(|h| (h as f64 * phase).sin() / h as f64).sum::<f64>();
        out.push((amp * env * s / 1.84) as f32);
    }
}

fn silence(rng: &mut ChaCha8Rng, out: &mut Vec<f32>, min_s: f64, max_s: f64) {
    let len = (rng.gen_range(min_s..max_s) * SAMPLE_RATE as f64) as usize;
    out.extend(std::iter::repeat_n(0.0, len));
}

/// One utterance of `words` bursts with a faint noise floor, quantized to
/// 16-bit PCM so that features match those extracted from the saved audio.
pub fn utterance_audio(rng: &mut ChaCha8Rng, words: usize) -> Vec<f32> {
    let mut out = Vec::new();
    silence(rng, &mut out, 0.1, 0.2);
    for _ in 0..words {
        tone_burst(rng, &mut out);
        silence(rng, &mut out, 0.08, 0.2);
    }
    for s in &mut out {
        *s = from_pcm16(to_pcm16(*s + rng.gen_range(-0.003..0.003)));
    }
    out
}

/// Writes the suite under `dir`: `feats/`, optional `audio/`, the CMVN file
/// and a manifest with paths relative to `dir`.
pub fn generate(dir: &Path, opts: &SynthOptions) -> Result<Suite> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    fs::create_dir_all(dir.join("feats"))?;
    if opts.write_audio {
        fs::create_dir_all(dir.join("audio"))?;
    }
    let mut feats: Vec<(String, FeatureMatrix)> = Vec::new();
    for i in 0..opts.utterances {
        let id = format!("synth{i:03}");
        let words = rng.gen_range(opts.min_words..=opts.max_words.max(opts.min_words));
        let audio = utterance_audio(&mut rng, words);
        if opts.write_audio {
            write_wav(&dir.join("audio").join(format!("{id}.wav")), &audio, SAMPLE_RATE)?;
        }
        feats.push((id, logmel(&audio, SAMPLE_RATE)?));
    }
    let stats = CmvnStats::from_features(feats.iter().map(|(_, f)| f))?;
    let cmvn_path = dir.join(CMVN_FILE);
    stats.save(&cmvn_path)?;

    let model = ToyModel::new(opts.model.clone())?;
    let vocab = &model.capabilities().vocab;
    let mut entries = Vec::new();
    for (id, f) in &feats {
        let rel = PathBuf::from("feats").join(format!("{id}.sgfb"));
        write_features(&dir.join(&rel), f)?;
        let enc = model.encode(global_cmvn(f, &stats)?.view())?;
        let out = model.decode_greedy(&enc, &[], DEFAULT_MAX_NEW)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            source: rel,
            reference: vocab.detokenize(&out.tokens)?,
            transcript: None,
        });
    }
    let relative = Manifest { entries };
    let manifest_path = dir.join(MANIFEST_FILE);
    relative.write(fs::File::create(&manifest_path)?)?;
    let manifest = crate::ingestion::load_manifest(&manifest_path)?;
    Ok(Suite { manifest_path, cmvn_path, manifest })
}
