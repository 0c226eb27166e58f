//! Batch evaluation over a manifest, run directories and sweep curves.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::ingestion::{global_cmvn, load_source, CmvnStats, Manifest, ManifestEntry};
use crate::metrics::{corpus_bleu, latency, reference_length, LatencyReport, QualityReport};
use crate::model::ModelAdapter;
use crate::policies::PolicyState;
use crate::simulator::{run_session, EmissionLog};

pub const CURVE_HEADER: &str = "param,bleu,laal_s,laal_ca_s,al_s";

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    /// Complete log, or whatever was committed before a failure.
    pub log: Option<EmissionLog>,
    pub error: Option<String>,
    /// Absent when the session failed or committed nothing.
    pub latency: Option<LatencyReport>,
}

impl UtteranceResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSummary {
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub num_words: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub laal_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub laal_ca_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub al_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub al_ca_s: Option<f64>,
}

/// Corpus record of one run. Means are taken over utterances that
/// completed and committed at least one word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub run_id: String,
    pub policy: String,
    pub param: f64,
    pub num_utterances: usize,
    pub num_failed: usize,
    pub num_scored: usize,
    pub bleu: Option<QualityReport>,
    pub mean_laal_s: Option<f64>,
    pub mean_laal_ca_s: Option<f64>,
    pub mean_al_s: Option<f64>,
    pub mean_al_ca_s: Option<f64>,
    pub utterances: Vec<UtteranceSummary>,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub config: SessionConfig,
    pub results: Vec<UtteranceResult>,
    pub aggregate: Aggregate,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content address of a run: the configuration, the utterance ids and
/// references, and the bytes of every source and of the CMVN file.
pub fn run_id(config: &SessionConfig, manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    let mut cfg = config.clone();
    let cmvn = cfg.cmvn.take();
    h.update(cfg.to_json().as_bytes());
    if let Some(path) = cmvn {
        h.update(b"\0cmvn\0");
        h.update(fs::read(path).unwrap_or_default());
    }
    for e in &manifest.entries {
        h.update(b"\0entry\0");
        h.update(e.id.as_bytes());
        h.update(b"\0");
        h.update(e.reference.as_bytes());
        h.update(b"\0");
        match fs::read(&e.source) {
            Ok(bytes) => h.update(Sha256::digest(&bytes)),
            Err(_) => h.update(b"missing"),
        }
    }
    hex(&h.finalize()[..8])
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn run_one(
    entry: &ManifestEntry,
    config: &SessionConfig,
    adapter: &dyn ModelAdapter,
    cmvn: Option<&CmvnStats>,
) -> UtteranceResult {
    let mut result = UtteranceResult {
        id: entry.id.clone(),
        reference: entry.reference.clone(),
        log: None,
        error: None,
        latency: None,
    };
    let source = load_source(&entry.source).and_then(|f| match cmvn {
        Some(stats) => global_cmvn(&f, stats),
        None => Ok(f),
    });
    let source = match source {
        Ok(s) => s,
        Err(e) => {
            result.error = Some(format!("{}: {e}", entry.source.display()));
            return result;
        }
    };
    let outcome = PolicyState::new(config.policy.clone()).map_err(|e| (EmissionLog::default(), e)).and_then(|state| {
        let mut clock = config.clock.start();
        run_session(&source, adapter, state, &config.session_options(adapter.capabilities()), clock.as_mut())
            .map_err(|e| (*e.partial, e.source))
    });
    match outcome {
        Ok(log) => {
            result.latency = latency(&log, reference_length(&entry.reference).max(1)).ok();
            result.log = Some(log);
        }
        Err((partial, e)) => {
            result.error = Some(e.to_string());
            result.log = Some(partial);
        }
    }
    result
}

fn aggregate(run_id: String, config: &SessionConfig, results: &[UtteranceResult]) -> Result<Aggregate> {
    let ok: Vec<&UtteranceResult> = results.iter().filter(|r| r.succeeded()).collect();
    let bleu = if ok.is_empty() {
        None
    } else {
        let hyps: Vec<&str> = ok.iter().map(|r| r.log.as_ref().map_or("", |l| l.final_text.as_str())).collect();
        let refs: Vec<&str> = ok.iter().map(|r| r.reference.as_str()).collect();
        Some(corpus_bleu(&hyps, &refs)?)
    };
    let scored: Vec<&LatencyReport> = ok.iter().filter_map(|r| r.latency.as_ref()).collect();
    let utterances = results
        .iter()
        .map(|r| UtteranceSummary {
            id: r.id.clone(),
            ok: r.succeeded(),
            error: r.error.clone(),
            num_words: r.latency.as_ref().map_or(0, |l| l.delays_s.len()),
            laal_s: r.latency.as_ref().map(|l| l.laal_s),
            laal_ca_s: r.latency.as_ref().map(|l| l.laal_ca_s),
            al_s: r.latency.as_ref().map(|l| l.al_s),
            al_ca_s: r.latency.as_ref().map(|l| l.al_ca_s),
        })
        .collect();
    Ok(Aggregate {
        run_id,
        policy: config.policy.name().to_string(),
        param: config.param_value(),
        num_utterances: results.len(),
        num_failed: results.len() - ok.len(),
        num_scored: scored.len(),
        bleu,
        mean_laal_s: mean(scored.iter().map(|l| l.laal_s)),
        mean_laal_ca_s: mean(scored.iter().map(|l| l.laal_ca_s)),
        mean_al_s: mean(scored.iter().map(|l| l.al_s)),
        mean_al_ca_s: mean(scored.iter().map(|l| l.al_ca_s)),
        utterances,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::arg(format!("cannot start workers: {e}")))
}

/// Runs every utterance of `manifest` under `config`. Per-utterance failures
/// are recorded and do not stop the run; results keep manifest order.
pub fn run_eval_with(
    manifest: &Manifest,
    config: &SessionConfig,
    adapter: &dyn ModelAdapter,
    workers: usize,
) -> Result<EvalRun> {
    config.validate()?;
    config.check_model(adapter.capabilities())?;
    if manifest.is_empty() {
        return Err(Error::arg("manifest has no utterances"));
    }
    let cmvn = config.cmvn.as_deref().map(CmvnStats::load).transpose()?;
    let results: Vec<UtteranceResult> = pool(workers)?.install(|| {
        manifest.entries.par_iter().map(|e| run_one(e, config, adapter, cmvn.as_ref())).collect()
    });
    let aggregate = aggregate(run_id(config, manifest), config, &results)?;
    Ok(EvalRun { config: config.clone(), results, aggregate })
}

/// [`run_eval_with`] using the adapter the configuration describes.
pub fn run_eval(manifest: &Manifest, config: &SessionConfig, workers: usize) -> Result<EvalRun> {
    config.validate()?;
    let adapter = config.adapter.build()?;
    run_eval_with(manifest, config, adapter.as_ref(), workers)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes a file unless an identical one is there; a differing file is an
/// error unless `overwrite` is set.
fn put(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite {
        if let Ok(existing) = fs::read(path) {
            if existing != bytes {
                return Err(Error::Format(format!(
                    "{} exists with different contents",
                    path.display()
                )));
            }
            return Ok(());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Lays a run out as `<out_dir>/<run_id>/{config.json, aggregate.json,
/// logs/<id>.jsonl}` and returns the run directory.
pub fn write_run(out_dir: &Path, run: &EvalRun, overwrite: bool) -> Result<PathBuf> {
    let dir = out_dir.join(&run.aggregate.run_id);
    let logs = dir.join("logs");
    fs::create_dir_all(&logs)?;
    put(&dir.join("config.json"), run.config.to_json().as_bytes(), overwrite)?;
    for r in &run.results {
        if let Some(log) = &r.log {
            let mut buf = BufWriter::new(Vec::new());
            log.write_jsonl(&mut buf)?;
            let bytes = buf.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            put(&logs.join(format!("{}.jsonl", r.id)), &bytes, overwrite)?;
        }
    }
    put(&dir.join("aggregate.json"), &json_bytes(&run.aggregate)?, overwrite)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub param: f64,
    pub bleu: f64,
    pub laal_s: f64,
    pub laal_ca_s: f64,
    pub al_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub param_name: String,
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{CURVE_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.param, r.bleu, r.laal_s, r.laal_ca_s, r.al_s)?;
        }
        Ok(())
    }

    /// Drops rows whose computation-aware LAAL exceeds `cap_s`.
    pub fn capped(&self, cap_s: f64) -> Self {
        Self {
            param_name: self.param_name.clone(),
            rows: self.rows.iter().filter(|r| r.laal_ca_s <= cap_s).cloned().collect(),
        }
    }
}

fn curve_row(a: &Aggregate) -> CurveRow {
    let nan = f64::NAN;
    CurveRow {
        param: a.param,
        bleu: a.bleu.as_ref().map_or(nan, |q| q.bleu),
        laal_s: a.mean_laal_s.unwrap_or(nan),
        laal_ca_s: a.mean_laal_ca_s.unwrap_or(nan),
        al_s: a.mean_al_s.unwrap_or(nan),
    }
}

pub struct Sweep {
    pub runs: Vec<EvalRun>,
    /// All points, before any cap.
    pub table: CurveTable,
}

/// Runs `base` once per value of its policy's main hyperparameter. Points
/// come out sorted by value.
pub fn sweep_with(
    manifest: &Manifest,
    base: &SessionConfig,
    grid: &[f64],
    adapter: &dyn ModelAdapter,
    workers: usize,
) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::arg("sweep grid is empty"));
    }
    let mut values = grid.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let configs = values.iter().map(|&v| base.with_param(v)).collect::<Result<Vec<_>>>()?;
    let runs = configs
        .iter()
        .map(|c| run_eval_with(manifest, c, adapter, workers))
        .collect::<Result<Vec<_>>>()?;
    let table = CurveTable {
        param_name: base.sweep_param().to_string(),
        rows: runs.iter().map(|r| curve_row(&r.aggregate)).collect(),
    };
    Ok(Sweep { runs, table })
}

pub fn sweep(manifest: &Manifest, base: &SessionConfig, grid: &[f64], workers: usize) -> Result<Sweep> {
    base.validate()?;
    let adapter = base.adapter.build()?;
    sweep_with(manifest, base, grid, adapter.as_ref(), workers)
}

/// Re-scores logs already on disk against the manifest references.
pub fn score_logs(manifest: &Manifest, logs_dir: &Path) -> Result<(Vec<UtteranceSummary>, Option<QualityReport>)> {
    let mut summaries = Vec::new();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for e in &manifest.entries {
        let path = logs_dir.join(format!("{}.jsonl", e.id));
        let parsed = fs::File::open(&path)
            .map_err(Error::from)
            .and_then(|f| EmissionLog::read_jsonl(std::io::BufReader::new(f)));
        let mut s = UtteranceSummary {
            id: e.id.clone(),
            ok: false,
            error: None,
            num_words: 0,
            laal_s: None,
            laal_ca_s: None,
            al_s: None,
            al_ca_s: None,
        };
        match parsed {
            Ok(log) => {
                s.ok = true;
                if let Ok(l) = latency(&log, reference_length(&e.reference).max(1)) {
                    s.num_words = l.delays_s.len();
                    s.laal_s = Some(l.laal_s);
                    s.laal_ca_s = Some(l.laal_ca_s);
                    s.al_s = Some(l.al_s);
                    s.al_ca_s = Some(l.al_ca_s);
                }
                hyps.push(log.final_text);
                refs.push(e.reference.clone());
            }
            Err(err) => s.error = Some(format!("{}: {err}", path.display())),
        }
        summaries.push(s);
    }
    let bleu = if hyps.is_empty() { None } else { Some(corpus_bleu(&hyps, &refs)?) };
    Ok((summaries, bleu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{write_features, FeatureMatrix};
    use crate::policies::PolicyConfig;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn suite(dir: &Path, n: usize) -> Manifest {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = (0..n)
            .map(|i| {
                let frames = rng.gen_range(120..320);
                let x = Array2::from_shape_simple_fn((frames, 80), || rng.gen_range(-1.0f32..1.0));
                let path = dir.join(format!("u{i}.sgfb"));
                write_features(&path, &FeatureMatrix::new(x, 10.0).unwrap()).unwrap();
                ManifestEntry {
                    id: format!("u{i}"),
                    source: path,
                    reference: "a b c d e f".into(),
                    transcript: None,
                }
            })
            .collect();
        Manifest { entries }
    }

    #[test]
    fn run_is_deterministic_and_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 5);
        let c = SessionConfig::new(PolicyConfig::AlignAtt { f: 4 });
        let a = run_eval(&m, &c, 1).unwrap();
        let b = run_eval(&m, &c, 4).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
        assert_eq!(a.results, b.results);
        assert_eq!(a.aggregate.num_failed, 0);
        assert_eq!(a.aggregate.num_scored, 5);
    }

    #[test]
    fn missing_source_fails_only_that_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = suite(dir.path(), 3);
        m.entries[1].source = dir.path().join("gone.sgfb");
        let c = SessionConfig::new(PolicyConfig::WaitK { k: 3 });
        let run = run_eval(&m, &c, 2).unwrap();
        assert_eq!(run.aggregate.num_failed, 1);
        assert!(!run.aggregate.utterances[1].ok);
        assert!(run.aggregate.utterances[1].error.as_ref().unwrap().contains("gone.sgfb"));
        assert_eq!(run.aggregate.num_scored, 2);
        let ok_only = Manifest { entries: vec![m.entries[0].clone(), m.entries[2].clone()] };
        let clean = run_eval(&ok_only, &c, 2).unwrap();
        assert_eq!(run.aggregate.mean_laal_s, clean.aggregate.mean_laal_s);
        assert_eq!(run.aggregate.bleu, clean.aggregate.bleu);
    }

    #[test]
    fn run_ids_track_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 2);
        let c = SessionConfig::new(PolicyConfig::AlignAtt { f: 4 });
        let id = run_id(&c, &m);
        assert_eq!(id, run_id(&c, &m));
        assert_eq!(id.len(), 16);
        assert_ne!(id, run_id(&c.with_param(6.0).unwrap(), &m));
        let mut m2 = m.clone();
        m2.entries[0].reference.push_str(" g");
        assert_ne!(id, run_id(&c, &m2));
    }

    #[test]
    fn run_directory_layout_and_rerun_guard() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 2);
        let c = SessionConfig::new(PolicyConfig::AlignAtt { f: 4 });
        let run = run_eval(&m, &c, 1).unwrap();
        let out = dir.path().join("out");
        let rd = write_run(&out, &run, false).unwrap();
        assert!(rd.join("aggregate.json").is_file());
        assert!(rd.join("config.json").is_file());
        assert!(rd.join("logs/u0.jsonl").is_file());
        write_run(&out, &run, false).unwrap();
        let mut other = run.clone();
        other.aggregate.mean_al_s = Some(-1.0);
        assert!(write_run(&out, &other, false).is_err());
        write_run(&out, &other, true).unwrap();
    }

    #[test]
    fn singleton_sweep_equals_run() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 3);
        let base = SessionConfig::new(PolicyConfig::AlignAtt { f: 2 });
        let s = sweep(&m, &base, &[4.0], 2).unwrap();
        let single = run_eval(&m, &base.with_param(4.0).unwrap(), 2).unwrap();
        assert_eq!(s.runs[0].aggregate, single.aggregate);
        assert_eq!(s.table.rows.len(), 1);
        assert_eq!(s.table.rows[0].laal_s, single.aggregate.mean_laal_s.unwrap());
        assert!(sweep(&m, &base, &[], 1).is_err());
    }

    #[test]
    fn sweep_rows_are_sorted_and_csv_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 2);
        let base = SessionConfig::new(PolicyConfig::AlignAtt { f: 2 });
        let s = sweep(&m, &base, &[6.0, 2.0, 4.0], 1).unwrap();
        let params: Vec<f64> = s.table.rows.iter().map(|r| r.param).collect();
        assert_eq!(params, vec![2.0, 4.0, 6.0]);
        let mut buf = Vec::new();
        s.table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CURVE_HEADER);
        assert_eq!(text.lines().count(), 4);
        assert!(s.table.capped(0.0).rows.is_empty());
        assert_eq!(s.table.capped(1e9).rows.len(), 3);
    }

    #[test]
    fn score_matches_run_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let m = suite(dir.path(), 3);
        let c = SessionConfig::new(PolicyConfig::EdAtt { alpha: 0.2, lambda: 2 });
        let run = run_eval(&m, &c, 1).unwrap();
        let rd = write_run(&dir.path().join("out"), &run, false).unwrap();
        let (summaries, bleu) = score_logs(&m, &rd.join("logs")).unwrap();
        assert_eq!(bleu, run.aggregate.bleu);
        assert_eq!(summaries, run.aggregate.utterances);
    }
}
