//! Audio and feature ingestion.
//!
//! * log-Mel filterbank features (25 ms Hann window, 10 ms hop, HTK mel
//!   scale, power spectrum, natural log floored at 1e-10)
//! * global CMVN with precomputed statistics
//! * binary feature files: little-endian, magic `SGFB`, `u32` version,
//!   `u32` frames, `u32` dims, `f32` frame shift in ms, then `f32` row-major
//! * JSON-lines manifests: `{"id", "source", "reference", "transcript"?}`

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_MEL_BINS: usize = 80;
pub const FRAME_SHIFT_MS: f32 = 10.0;
pub const FRAME_WINDOW_MS: f32 = 25.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const SUPPORTED_RATES: [u32; 5] = [8000, 16000, 22050, 44100, 48000];

const MAGIC: &[u8; 4] = b"SGFB";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `T × F` feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f32>,
    pub frame_shift_ms: f32,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f32>, frame_shift_ms: f32) -> Result<Self> {
        if !(frame_shift_ms > 0.0) {
            return Err(Error::arg("frame shift must be positive"));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("feature matrix contains non-finite values"));
        }
        Ok(Self { frames, frame_shift_ms })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.frames.view()
    }

    /// Duration covered by the frames, in seconds.
    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift_ms as f64 / 1000.0
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Frames produced by sliding a `window` with stride `hop` over `samples`.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        1 + (samples - window) / hop
    }
}

/// Triangular filters, equally spaced on the mel scale from 0 Hz to Nyquist,
/// evaluated on the `n_fft / 2 + 1` FFT bin frequencies.
pub fn mel_filterbank(num_bins: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> =
        (0..num_bins + 2).map(|k| k as f64 * mel_max / (num_bins + 1) as f64).collect();
    let n_freqs = n_fft / 2 + 1;
    Array2::from_shape_fn((num_bins, n_freqs), |(b, k)| {
        let mel = hz_to_mel(k as f64 * sample_rate as f64 / n_fft as f64);
        let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        if mel <= lo || mel >= hi {
            0.0
        } else if mel <= c {
            (mel - lo) / (c - lo)
        } else {
            (hi - mel) / (hi - c)
        }
    })
}

/// 80-dimensional log-Mel features every 10 ms over a 25 ms window.
pub fn logmel(samples: &[f32], sample_rate: u32) -> Result<FeatureMatrix> {
    if !SUPPORTED_RATES.contains(&sample_rate) {
        return Err(Error::arg(format!("unsupported sample rate {sample_rate}")));
    }
    let window = (sample_rate as usize * FRAME_WINDOW_MS as usize) / 1000;
    let hop = (sample_rate as usize * FRAME_SHIFT_MS as usize) / 1000;
    let t = frame_count(samples.len(), window, hop);
    if t == 0 {
        return Err(Error::arg(format!(
            "{} samples is shorter than one {window}-sample window",
            samples.len()
        )));
    }
    let n_fft = window.next_power_of_two();
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();
    let fbank = mel_filterbank(NUM_MEL_BINS, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut frames = Array2::<f32>::zeros((t, NUM_MEL_BINS));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = Array1::<f64>::zeros(n_fft / 2 + 1);
    for (f, mut out) in frames.axis_iter_mut(Axis(0)).enumerate() {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = if i < window { samples[start + i] as f64 * hann[i] } else { 0.0 };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let energies = fbank.dot(&power);
        for (o, e) in out.iter_mut().zip(energies.iter()) {
            *o = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    FeatureMatrix::new(frames, FRAME_SHIFT_MS)
}

/// Per-dimension mean and variance for global CMVN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl CmvnStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    /// Pooled statistics over every frame of every matrix. Variances are
    /// floored at 1e-10 so constant dimensions stay usable.
    pub fn from_features<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.dim()];
                sq = vec![0.0; m.dim()];
            } else if m.dim() != sum.len() {
                return Err(Error::dim("feature matrices differ in dimension"));
            }
            for row in m.frames.axis_iter(Axis(0)) {
                for (k, &x) in row.iter().enumerate() {
                    sum[k] += x as f64;
                    sq[k] += x as f64 * x as f64;
                }
            }
            count += m.num_frames();
        }
        if count == 0 {
            return Err(Error::arg("no frames to compute CMVN statistics from"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-10)).collect();
        Ok(Self { mean, var })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// `(x - mean) / sqrt(var)` per dimension.
pub fn global_cmvn(f: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    if stats.mean.len() != f.dim() || stats.var.len() != f.dim() {
        return Err(Error::arg(format!(
            "CMVN statistics have {} dims, features have {}",
            stats.mean.len(),
            f.dim()
        )));
    }
    if let Some(v) = stats.var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::arg(format!("CMVN variance must be positive, got {v}")));
    }
    let mut out = f.frames.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for (k, x) in row.iter_mut().enumerate() {
            *x = ((*x as f64 - stats.mean[k]) / stats.var[k].sqrt()) as f32;
        }
    }
    FeatureMatrix::new(out, f.frame_shift_ms)
}

pub fn features_to_bytes(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    out.extend_from_slice(&f.frame_shift_ms.to_le_bytes());
    for x in f.frames.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("file shorter than the header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (t, f) = (word(8) as usize, word(12) as usize);
    let shift = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() != t * f * 4 {
        return Err(Error::Format(format!(
            "body has {} bytes, header announces {t}x{f} f32",
            body.len()
        )));
    }
    let data: Vec<f32> =
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let frames = Array2::from_shape_vec((t, f), data).map_err(|e| Error::Format(e.to_string()))?;
    FeatureMatrix::new(frames, shift)
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    fs::write(path, features_to_bytes(f))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    features_from_bytes(&fs::read(path)?)
}

pub fn to_pcm16(sample: f32) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn from_pcm16(v: i16) -> f32 {
    v as f32 / 32768.0
}

/// Mono 16-bit PCM samples scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::arg(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(from_pcm16))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// Loads a source: `.wav` files go through [`logmel`], anything else is read
/// as a feature file.
pub fn load_source(path: &Path) -> Result<FeatureMatrix> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let (samples, rate) = read_wav(path)?;
        logmel(&samples, rate)
    } else {
        read_features(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub source: PathBuf,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses JSON-lines; relative sources are resolved against `base_dir`.
    /// Blank lines are skipped.
    pub fn parse(reader: impl BufRead, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Parse { line: lineno, msg: format!("duplicate id {:?}", entry.id) });
            }
            if entry.source.is_relative() {
                entry.source = base_dir.join(&entry.source);
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Manifest::parse(BufReader::new(file), base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(t: usize, f: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_simple_fn((t, f), || rng.gen_range(-5.0..5.0)), 10.0)
            .unwrap()
    }

    #[test]
    fn one_second_at_16k_has_98_frames() {
        let f = logmel(&vec![0.1; 16000], 16000).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn silence_is_flat_at_the_floor() {
        let f = logmel(&vec![0.0; 8000], 16000).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(f.frames.iter().all(|&x| x == floor));
    }

    #[test]
    fn too_short_or_bad_rate_is_rejected() {
        assert!(logmel(&[0.0; 399], 16000).is_err());
        assert!(logmel(&[0.0; 400], 16000).is_ok());
        assert!(logmel(&[0.0; 4000], 11025).is_err());
    }

    #[test]
    fn sine_energy_lands_in_filter_covering_its_frequency() {
        let sr = 16000u32;
        let samples: Vec<f32> = (0..sr)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        let f = logmel(&samples, sr).unwrap();
        let frame = f.frames.row(50);
        let argmax = (0..80).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();

        // independent table of filter edges in Hz via the closed-form mel scale
        let mel_max = 2595.0 * (1.0 + 8000.0f64 / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let covering: Vec<usize> = (0..80)
            .filter(|&b| {
                let lo = hz(b as f64 * mel_max / 81.0);
                let hi = hz((b + 2) as f64 * mel_max / 81.0);
                lo < 440.0 && 440.0 < hi
            })
            .collect();
        assert!(covering.contains(&argmax), "argmax bin {argmax} not in {covering:?}");
    }

    #[test]
    fn filterbank_peaks_are_unit() {
        let fb = mel_filterbank(80, 512, 16000);
        for row in fb.axis_iter(Axis(0)) {
            let max = row.iter().copied().fold(0.0, f64::max);
            assert!(max > 0.0 && max <= 1.0);
        }
        assert_abs_diff_eq!(mel_to_hz(hz_to_mel(1234.5)), 1234.5, epsilon = 1e-9);
    }

    #[test]
    fn cmvn_identity_and_self_standardization() {
        let f = seeded(50, 6, 1);
        let same = global_cmvn(&f, &CmvnStats::identity(6)).unwrap();
        assert_eq!(same, f);

        let stats = CmvnStats::from_features([&f]).unwrap();
        let z = global_cmvn(&f, &stats).unwrap();
        for col in z.frames.axis_iter(Axis(1)) {
            let n = col.len() as f64;
            let mean = col.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = col.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cmvn_matches_hand_standardized_values() {
        let f = FeatureMatrix::new(ndarray::array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]], 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        fs::write(&path, r#"{"mean":[2.0,10.0],"var":[4.0,25.0]}"#).unwrap();
        let stats = CmvnStats::load(&path).unwrap();
        let z = global_cmvn(&f, &stats).unwrap();
        let expected = ndarray::array![[-0.5, 0.0], [0.0, 2.0], [0.5, 4.0]];
        assert_eq!(z.frames, expected);
    }

    #[test]
    fn cmvn_errors() {
        let f = seeded(4, 3, 2);
        assert!(global_cmvn(&f, &CmvnStats::identity(2)).is_err());
        let zero_var = CmvnStats { mean: vec![0.0; 3], var: vec![1.0, 0.0, 1.0] };
        assert!(global_cmvn(&f, &zero_var).is_err());
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let f = seeded(7, 80, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sgfb");
        write_features(&p, &f).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.frame_shift_ms, f.frame_shift_ms);
        assert!(back.frames.iter().zip(f.frames.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn feature_header_layout() {
        let f = seeded(2, 3, 0);
        let bytes = features_to_bytes(&f);
        assert_eq!(&bytes[..4], b"SGFB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 10.0);
        assert_eq!(bytes.len(), 20 + 2 * 3 * 4);
        assert!(features_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(features_from_bytes(&bad).is_err());
    }

    #[test]
    fn missing_feature_file_is_io_error() {
        assert!(matches!(read_features(Path::new("/nonexistent/x.sgfb")), Err(Error::Io(_))));
    }

    #[test]
    fn manifest_parsing() {
        let text = "{\"id\":\"a\",\"source\":\"a.sgfb\",\"reference\":\"hallo welt\"}\n\n\
                    {\"id\":\"b\",\"source\":\"/abs/b.wav\",\"reference\":\"x\",\"transcript\":\"hello\"}\n";
        let m = Manifest::parse(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].source, PathBuf::from("/data/a.sgfb"));
        assert_eq!(m.entries[1].source, PathBuf::from("/abs/b.wav"));
        assert_eq!(m.entries[1].transcript.as_deref(), Some("hello"));

        let empty = Manifest::parse("".as_bytes(), Path::new(".")).unwrap();
        assert!(empty.is_empty());

        let dup = "{\"id\":\"a\",\"source\":\"a\",\"reference\":\"r\"}\n{\"id\":\"a\",\"source\":\"b\",\"reference\":\"r\"}\n";
        assert!(matches!(Manifest::parse(dup.as_bytes(), Path::new(".")), Err(Error::Parse { line: 2, .. })));

        let broken = "{\"id\":\"a\",\"source\":\"a\",\"reference\":\"r\"}\n{oops\n";
        assert!(matches!(Manifest::parse(broken.as_bytes(), Path::new(".")), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn wav_source_goes_through_logmel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tone.wav");
        let samples: Vec<f32> = (0..16000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
        write_wav(&p, &samples, 16000).unwrap();
        let f = load_source(&p).unwrap();
        assert_eq!(f.num_frames(), 98);
    }

    #[test]
    fn quantized_samples_survive_wav_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        let samples: Vec<f32> = [-1.0, -0.5, 0.0, 0.25, 0.999, 1.0, 3.0]
            .iter()
            .map(|&x| from_pcm16(to_pcm16(x)))
            .collect();
        write_wav(&p, &samples, 16000).unwrap();
        let (back, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(back, samples);
        assert_eq!(to_pcm16(3.0), i16::MAX);
        assert_eq!(to_pcm16(-1.0), i16::MIN);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn framing_formula_holds(len in 400usize..48000) {
            let samples = vec![0.01f32; len];
            let f = logmel(&samples, 16000).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (len - 400) / 160);
        }
    }

    proptest! {
        #[test]
        fn random_matrices_round_trip(t in 0usize..20, d in 1usize..12, seed in any::<u64>()) {
            let f = seeded(t, d, seed);
            let back = features_from_bytes(&features_to_bytes(&f)).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn cmvn_is_idempotent_on_standardized_output(seed in any::<u64>()) {
            let f = seeded(30, 4, seed);
            let z = global_cmvn(&f, &CmvnStats::from_features([&f]).unwrap()).unwrap();
            let again = global_cmvn(&z, &CmvnStats::from_features([&z]).unwrap()).unwrap();
            for (a, b) in again.frames.iter().zip(z.frames.iter()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
