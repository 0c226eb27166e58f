//! `simulst`: run, sweep and score simultaneous translation policies.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use simulst_core::config::{SessionConfig, DEFAULT_LAAL_CAP_S};
use simulst_core::eval::{run_eval, score_logs, sweep, write_run};
use simulst_core::ingestion::{
    load_manifest, load_source, write_features, CmvnStats, Manifest, ManifestEntry,
};
use simulst_core::model::{bridge, ToyConfig, ToyModel};
use simulst_core::synth::{self, SynthOptions};

const EXIT_FAILURES: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Bad input from the caller; reported with exit status 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
    anyhow::Error::new(Usage(e.into()))
}

/// Argument errors raised before any utterance is decoded are the caller's.
fn setup_error(e: simulst_core::Error) -> anyhow::Error {
    if matches!(e, simulst_core::Error::Argument(_)) {
        usage(e)
    } else {
        e.into()
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Parser)]
#[command(name = "simulst", version, about = "Simultaneous speech translation policy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over a manifest.
    Run(RunArgs),
    /// Run a configuration once per hyperparameter value and write a curve table.
    Sweep(SweepArgs),
    /// Score emission logs already on disk.
    Score(ScoreArgs),
    /// Compute log-Mel features from audio.
    ExtractFeatures(ExtractArgs),
    /// Generate the seeded synthetic suite.
    Synth(SynthArgs),
    /// Serve the toy model over the bridge protocol on stdin/stdout.
    #[command(hide = true)]
    ServeToy {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Full toy model configuration as JSON; overrides --seed.
        #[arg(long)]
        model: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyName {
    #[value(name = "alignatt")]
    AlignAtt,
    #[value(name = "edatt")]
    EdAtt,
    #[value(name = "waitk")]
    WaitK,
    #[value(name = "local_agreement")]
    LocalAgreement,
}

impl PolicyName {
    fn kind(self) -> &'static str {
        match self {
            PolicyName::AlignAtt => "alignatt",
            PolicyName::EdAtt => "edatt",
            PolicyName::WaitK => "waitk",
            PolicyName::LocalAgreement => "local_agreement",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockMode {
    Simulated,
    Real,
}

/// Flags that override keys of the configuration file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyName>,
    /// AlignAtt frame window.
    #[arg(long)]
    f: Option<usize>,
    /// EDAtt threshold.
    #[arg(long)]
    alpha: Option<f64>,
    /// EDAtt frame window.
    #[arg(long)]
    lambda: Option<usize>,
    /// Wait-k lag in words.
    #[arg(long)]
    k: Option<usize>,
    /// Local Agreement segment length in ms.
    #[arg(long)]
    ts_ms: Option<u32>,
    /// Local Agreement hypotheses that must agree.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    chunk_ms: Option<f64>,
    #[arg(long)]
    aggregation_layer: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long, value_enum)]
    clock: Option<ClockMode>,
    /// Global CMVN statistics file.
    #[arg(long)]
    cmvn: Option<PathBuf>,
    #[arg(long)]
    laal_cap_s: Option<f64>,
    /// Use the toy model with this seed.
    #[arg(long, conflicts_with = "bridge")]
    toy_seed: Option<u64>,
    /// Use an external model process (command line, split on whitespace).
    #[arg(long)]
    bridge: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<SessionConfig> {
        self.resolve_with(None)
    }

    /// `sweep_value` stands in for the swept hyperparameter when neither the
    /// file nor the flags set it.
    fn resolve_with(&self, sweep_value: Option<f64>) -> anyhow::Result<SessionConfig> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(usage)?;
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing {}", path.display()))
                    .map_err(usage)?
            }
            None => json!({}),
        };
        let obj = doc.as_object_mut().ok_or_else(|| usage(anyhow!("configuration must be a JSON object")))?;
        self.apply(obj);
        if !obj.contains_key("policy") {
            return Err(usage(anyhow!("no policy given; pass --policy or a config file")));
        }
        if let (Some(v), Some(policy)) = (sweep_value, obj.get_mut("policy").and_then(Value::as_object_mut)) {
            let key = match policy.get("kind").and_then(Value::as_str) {
                Some("alignatt") => Some("f"),
                Some("edatt") => Some("alpha"),
                Some("waitk") => Some("k"),
                Some("local_agreement") => Some("ts_ms"),
                _ => None,
            };
            if let Some(key) = key {
                let value = if key == "alpha" { Value::from(v) } else { Value::from(v as u64) };
                policy.entry(key).or_insert(value);
            }
        }
        let config: SessionConfig = serde_json::from_value(doc).map_err(usage)?;
        config.validate().map_err(usage)?;
        Ok(config)
    }

    fn apply(&self, obj: &mut Map<String, Value>) {
        if let Some(p) = self.policy {
            let same = obj.get("policy").and_then(|v| v.get("kind")).and_then(Value::as_str) == Some(p.kind());
            if !same {
                obj.insert("policy".into(), json!({ "kind": p.kind() }));
            }
        }
        let policy_keys = [
            ("f", self.f.map(Value::from)),
            ("alpha", self.alpha.map(Value::from)),
            ("lambda", self.lambda.map(Value::from)),
            ("k", self.k.map(Value::from)),
            ("ts_ms", self.ts_ms.map(Value::from)),
            ("window", self.window.map(Value::from)),
        ];
        for (key, value) in policy_keys {
            if let Some(v) = value {
                let policy = obj.entry("policy").or_insert_with(|| json!({}));
                if let Some(p) = policy.as_object_mut() {
                    p.insert(key.into(), v);
                }
            }
        }
        let top_keys = [
            ("chunk_ms", self.chunk_ms.map(Value::from)),
            ("aggregation_layer", self.aggregation_layer.map(Value::from)),
            ("max_new", self.max_new.map(Value::from)),
            ("cmvn", self.cmvn.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned()))),
            ("laal_cap_s", self.laal_cap_s.map(Value::from)),
        ];
        for (key, value) in top_keys {
            if let Some(v) = value {
                obj.insert(key.into(), v);
            }
        }
        match self.clock {
            Some(ClockMode::Real) => {
                obj.insert("clock".into(), json!({ "mode": "real" }));
            }
            Some(ClockMode::Simulated) => {
                let keep = obj.get("clock").and_then(|c| c.get("mode")).and_then(Value::as_str) == Some("simulated");
                if !keep {
                    obj.insert("clock".into(), json!({ "mode": "simulated" }));
                }
            }
            None => {}
        }
        if let Some(seed) = self.toy_seed {
            let adapter = obj.entry("adapter").or_insert_with(|| json!({ "kind": "toy" }));
            if adapter.get("kind").and_then(Value::as_str) != Some("toy") {
                *adapter = json!({ "kind": "toy" });
            }
            let model = adapter.as_object_mut().unwrap().entry("model").or_insert_with(|| json!({}));
            if let Some(m) = model.as_object_mut() {
                m.insert("seed".into(), Value::from(seed));
            }
        }
        if let Some(cmd) = &self.bridge {
            let command: Vec<&str> = cmd.split_whitespace().collect();
            obj.insert("adapter".into(), json!({ "kind": "bridge", "command": command }));
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output root; the run goes to <out>/<run id>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, env = "SIMULST_WORKERS", default_value_t = default_workers())]
    workers: usize,
    /// Replace an existing run directory whose contents differ.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Values of the policy's hyperparameter (f, alpha, k or ts_ms).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    grid: Vec<f64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Curve CSV path; stdout when absent.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Keep rows above the computation-aware LAAL cap.
    #[arg(long)]
    no_cap: bool,
    #[arg(long, env = "SIMULST_WORKERS", default_value_t = default_workers())]
    workers: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding <id>.jsonl emission logs.
    #[arg(long)]
    logs: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct ExtractInput {
    /// A single audio file.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// A manifest whose sources are audio files.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    input: ExtractInput,
    /// Feature file (with --wav) or output directory (with --manifest).
    #[arg(long)]
    out: PathBuf,
    /// Also fit global CMVN statistics over the manifest and write them here.
    #[arg(long)]
    cmvn_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    utterances: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Seed of the toy model that writes the references.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    /// Keep waveforms next to the features.
    #[arg(long)]
    audio: bool,
}

fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let m = load_manifest(path).with_context(|| format!("loading {}", path.display())).map_err(usage)?;
    if m.is_empty() {
        return Err(usage(anyhow!("{} lists no utterances", path.display())));
    }
    Ok(m)
}

fn check_workers(workers: usize) -> anyhow::Result<()> {
    if workers == 0 {
        return Err(usage(anyhow!("--workers must be >= 1")));
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<u8> {
    check_workers(args.workers)?;
    let config = args.config.resolve()?;
    let manifest = read_manifest(&args.manifest)?;
    let run = run_eval(&manifest, &config, args.workers).map_err(setup_error)?;
    let dir = write_run(&args.out, &run, args.force)?;
    let a = &run.aggregate;
    for u in a.utterances.iter().filter(|u| !u.ok) {
        eprintln!("failed {}: {}", u.id, u.error.as_deref().unwrap_or(""));
    }
    eprintln!(
        "{} utterances, {} failed; BLEU {} LAAL {} s (CA {} s) AL {} s",
        a.num_utterances,
        a.num_failed,
        fmt_opt(a.bleu.as_ref().map(|b| b.bleu)),
        fmt_opt(a.mean_laal_s),
        fmt_opt(a.mean_laal_ca_s),
        fmt_opt(a.mean_al_s),
    );
    println!("{}", dir.display());
    Ok(if a.num_failed > 0 { EXIT_FAILURES } else { 0 })
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<u8> {
    check_workers(args.workers)?;
    if args.grid.is_empty() {
        return Err(usage(anyhow!("--grid needs at least one value")));
    }
    let base = args.config.resolve_with(args.grid.first().copied())?;
    let manifest = read_manifest(&args.manifest)?;
    for &v in &args.grid {
        base.with_param(v).map_err(usage)?;
    }
    let result = sweep(&manifest, &base, &args.grid, args.workers).map_err(setup_error)?;
    let mut failed = 0;
    for run in &result.runs {
        let dir = write_run(&args.out, run, args.force)?;
        eprintln!("{}={} -> {}", base.sweep_param(), run.aggregate.param, dir.display());
        failed += run.aggregate.num_failed;
    }
    let table = if args.no_cap {
        result.table
    } else {
        result.table.capped(base.laal_cap_s.unwrap_or(DEFAULT_LAAL_CAP_S))
    };
    match &args.curve {
        Some(path) => table.write_csv(BufWriter::new(fs::File::create(path)?))?,
        None => table.write_csv(io::stdout().lock())?,
    }
    Ok(if failed > 0 { EXIT_FAILURES } else { 0 })
}

fn cmd_score(args: ScoreArgs) -> anyhow::Result<u8> {
    let manifest = read_manifest(&args.manifest)?;
    let (utterances, bleu) = score_logs(&manifest, &args.logs)?;
    let failed = utterances.iter().filter(|u| !u.ok).count();
    let mean = |get: fn(&simulst_core::eval::UtteranceSummary) -> Option<f64>| {
        let xs: Vec<f64> = utterances.iter().filter_map(get).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let report = json!({
        "num_utterances": utterances.len(),
        "num_failed": failed,
        "bleu": bleu,
        "mean_laal_s": mean(|u| u.laal_s),
        "mean_laal_ca_s": mean(|u| u.laal_ca_s),
        "mean_al_s": mean(|u| u.al_s),
        "mean_al_ca_s": mean(|u| u.al_ca_s),
        "utterances": utterances,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(if failed > 0 { EXIT_FAILURES } else { 0 })
}

fn cmd_extract(args: ExtractArgs) -> anyhow::Result<u8> {
    if let Some(wav) = &args.input.wav {
        let feats = load_source(wav).with_context(|| format!("reading {}", wav.display()))?;
        write_features(&args.out, &feats)?;
        if let Some(path) = &args.cmvn_out {
            CmvnStats::from_features([&feats])?.save(path)?;
        }
        return Ok(0);
    }
    let manifest_path = args.input.manifest.as_ref().expect("clap enforces one input");
    let manifest = read_manifest(manifest_path)?;
    fs::create_dir_all(args.out.join("feats"))?;
    let mut entries = Vec::new();
    let mut all = Vec::new();
    let mut failed = 0;
    for e in &manifest.entries {
        match load_source(&e.source) {
            Ok(f) => {
                let rel = PathBuf::from("feats").join(format!("{}.sgfb", e.id));
                write_features(&args.out.join(&rel), &f)?;
                entries.push(ManifestEntry { source: rel, ..e.clone() });
                all.push(f);
            }
            Err(err) => {
                eprintln!("failed {}: {}: {err}", e.id, e.source.display());
                failed += 1;
            }
        }
    }
    Manifest { entries }.write(BufWriter::new(fs::File::create(args.out.join("manifest.jsonl"))?))?;
    if let Some(path) = &args.cmvn_out {
        if !all.is_empty() {
            CmvnStats::from_features(all.iter())?.save(path)?;
        }
    }
    Ok(if failed > 0 { EXIT_FAILURES } else { 0 })
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<u8> {
    let opts = SynthOptions {
        utterances: args.utterances,
        seed: args.seed,
        write_audio: args.audio,
        model: ToyConfig { seed: args.model_seed, ..ToyConfig::default() },
        ..SynthOptions::default()
    };
    if opts.utterances == 0 {
        return Err(usage(anyhow!("--utterances must be >= 1")));
    }
    let suite = synth::generate(&args.out, &opts)?;
    println!("{}", suite.manifest_path.display());
    eprintln!("global CMVN statistics in {0}; pass --cmvn {0} to run and sweep", suite.cmvn_path.display());
    Ok(0)
}

fn cmd_serve_toy(seed: u64, model: Option<String>) -> anyhow::Result<u8> {
    let config = match model {
        Some(text) => serde_json::from_str(&text).map_err(usage)?,
        None => ToyConfig { seed, ..ToyConfig::default() },
    };
    let toy = ToyModel::new(config).map_err(usage)?;
    bridge::serve(&toy, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Score(a) => cmd_score(a),
        Command::ExtractFeatures(a) => cmd_extract(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ServeToy { seed, model } => cmd_serve_toy(seed, model),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { EXIT_USAGE } else { EXIT_FAILURES })
        }
    }
}
