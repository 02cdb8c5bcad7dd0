//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid,
//! 2 when a run fails. With `--json` errors are also written to stderr as one
//! JSON line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_canonical, load_catalogue, read_manifest, scan_dir, write_manifest, Role, Waveform};
use crate::degrade::{write_dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{self, read_jsonl, SuiteConfig, TwoAfcItem};
use crate::model::ModelConfig;
use crate::score::{ScoreReport, Scorer};
use crate::synth::{generate, write_corpus, CorpusConfig};
use crate::train::{fit, Databases, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "noresqa", version, about = "Non-matching reference speech quality assessment")]
struct Cli {
    /// Also report errors as a JSON line on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build clean/noise/rir manifests from directories or a synthetic corpus.
    Ingest(IngestArgs),
    /// Write a labelled pair dataset.
    Degrade(DegradeArgs),
    /// Train a model, resuming from the run directory if it has a checkpoint.
    Train(TrainArgs),
    /// Score a test recording against one or more non-matching references.
    Score(ScoreArgs),
    /// Run an evaluation suite against a checkpoint.
    Evaluate(EvaluateArgs),
    /// Dump quality embeddings as CSV.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long)]
    rir: Option<PathBuf>,
    /// Generate the synthetic corpus instead of scanning directories.
    #[arg(long, conflicts_with_all = ["clean", "noise", "rir"])]
    synthetic: bool,
    /// Corpus configuration JSON (synthetic mode).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    /// Sampler configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding clean.jsonl, noise.jsonl and optionally rir.jsonl.
    #[arg(long)]
    manifests: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
    Miniature,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration JSON with `model`, `train` and `sampler` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model used when the configuration has no `model` section.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    manifests: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    refs: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Suite {
    /// Commutativity, identicals, monotonicity, quantification curve.
    Properties,
    /// Retrieval, synthetic 2AFC, multi-reference variance.
    Probes,
    /// 2AFC accuracy on a manifest of TwoAfcItem lines.
    TwoAfc,
    /// Correlation with ratings from a manifest of {path, rating} lines.
    Correlation,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long)]
    ckpt: PathBuf,
    /// Suite configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// References for the correlation suite.
    #[arg(long, num_args = 1..)]
    refs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Everything a training run depends on; saved into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub manifests: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    sampler: SamplerConfig,
}

#[derive(Debug, Deserialize)]
struct RatingLine {
    path: PathBuf,
    rating: f64,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidManifest { .. } | Error::EmptyManifest(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn error_kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_role(dir: &Path, name: &str, required: bool) -> Result<Vec<Waveform>> {
    let path = dir.join(format!("{name}.jsonl"));
    if !path.exists() && !required {
        return Ok(Vec::new());
    }
    load_catalogue(&read_manifest(path)?)
}

fn ingest(a: IngestArgs, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    if a.synthetic {
        let mut cfg: CorpusConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => CorpusConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        write_json(&a.out.join(CONFIG_FILE), &cfg)?;
        return write_corpus(&a.out, &generate(&cfg)?);
    }
    let (Some(clean), Some(noise)) = (&a.clean, &a.noise) else {
        return Err(Error::InvalidConfig("ingest needs --clean and --noise, or --synthetic".into()));
    };
    for (dir, role, name) in [(Some(clean), Role::Clean, "clean"), (Some(noise), Role::Noise, "noise"), (a.rir.as_ref(), Role::Rir, "rir")] {
        if let Some(d) = dir {
            write_manifest(a.out.join(format!("{name}.jsonl")), &scan_dir(d, role)?)?;
        }
    }
    Ok(())
}

fn degrade(a: DegradeArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => SamplerConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let clean = load_role(&a.manifests, "clean", true)?;
    let noise = load_role(&a.manifests, "noise", false)?;
    let rirs = load_role(&a.manifests, "rir", false)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    write_dataset(&a.out, a.count, &clean, &noise, &rirs, &cfg)?;
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let file: RunConfigFile = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfigFile::default(),
    };
    let model = file.model.unwrap_or_else(|| match a.preset {
        Preset::Paper => ModelConfig::default(),
        Preset::Desk => ModelConfig::desk(),
        Preset::Miniature => ModelConfig::miniature(),
    });
    let mut run = RunConfig { model, train: file.train, sampler: file.sampler, manifests: a.manifests, seed: 0 };
    if let Some(s) = seed {
        run.train.seed = s;
        run.sampler.seed = s;
    }
    run.seed = run.train.seed;
    run.model.validate()?;
    run.train.validate()?;
    run.sampler.validate()?;

    let saved = a.out.join(CONFIG_FILE);
    if saved.exists() {
        let previous: RunConfig = read_json(&saved)?;
        if previous != run {
            return Err(Error::InvalidConfig(format!(
                "{} holds a different configuration; use a fresh --out",
                saved.display()
            )));
        }
    }
    fs::create_dir_all(&a.out)?;
    write_json(&saved, &run)?;

    let clean = load_role(&run.manifests, "clean", true)?;
    let noise = load_role(&run.manifests, "noise", false)?;
    let rirs = load_role(&run.manifests, "rir", false)?;
    let db = Databases { clean: &clean, noise: &noise, rirs: &rirs };
    let last = fit(db, &run.model, &run.train, &run.sampler, &a.out)?;
    print_json(&serde_json::json!({ "checkpoint": last }))
}

fn score(a: ScoreArgs) -> Result<()> {
    let scorer = Scorer::from_checkpoint(&a.ckpt)?;
    let test = load_canonical(&a.test)?;
    let refs = a.refs.iter().map(load_canonical).collect::<Result<Vec<_>>>()?;
    let avg = scorer.noresqa_avg(&test, &refs)?;
    let report = ScoreReport {
        test_path: a.test,
        ref_paths: a.refs,
        magnitude_db: avg.score.magnitude_db,
        sign: avg.score.sign,
        pref_confidence: avg.score.pref_confidence,
        per_ref: avg.per_ref,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn evaluate(a: EvaluateArgs, seed: Option<u64>) -> Result<()> {
    let scorer = Scorer::from_checkpoint(&a.ckpt)?;
    let mut cfg: SuiteConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SuiteConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = || a.manifest.as_ref().ok_or_else(|| Error::InvalidConfig("this suite needs --manifest".into()));
    let report = match a.suite {
        Suite::Properties => serde_json::to_value(eval::property_suite(&scorer, &cfg))?,
        Suite::Probes => serde_json::to_value(eval::probe_suite(&scorer, &cfg))?,
        Suite::TwoAfc => {
            let items: Vec<TwoAfcItem> = read_jsonl(manifest()?)?;
            serde_json::to_value(eval::two_afc_accuracy(&items, &scorer)?)?
        }
        Suite::Correlation => {
            if a.refs.is_empty() {
                return Err(Error::InvalidConfig("the correlation suite needs --refs".into()));
            }
            let lines: Vec<RatingLine> = read_jsonl(manifest()?)?;
            let refs = a.refs.iter().map(load_canonical).collect::<Result<Vec<_>>>()?;
            let items: Vec<(PathBuf, f64)> = lines.into_iter().map(|l| (l.path, l.rating)).collect();
            let (rated, corr) = eval::rate_items(&items, &refs, &scorer)?;
            serde_json::json!({ "suite": "correlation", "correlation": corr, "items": rated })
        }
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let scorer = Scorer::from_checkpoint(&a.ckpt)?;
    let dim = scorer.network().config().embedding_dim();
    let mut csv = String::from("path");
    for d in 0..dim {
        csv.push_str(&format!(",e{d}"));
    }
    csv.push('\n');
    for p in &a.inputs {
        let e = scorer.quality_embedding(&load_canonical(p)?)?;
        csv.push_str(&p.to_string_lossy().replace(',', "_"));
        for v in e {
            csv.push_str(&format!(",{v:e}"));
        }
        csv.push('\n');
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, csv)?;
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let json = cli.json;
    let seed = cli.seed;
    let result = match cli.command {
        Command::Ingest(a) => ingest(a, seed),
        Command::Degrade(a) => degrade(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Embed(a) => embed(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            if json {
                let line = serde_json::json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": code });
                eprintln!("{line}");
            }
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_errors_exit_with_one() {
        assert_eq!(run_command(["noresqa", "frobnicate"]), 1);
        assert_eq!(run_command(["noresqa", "score", "--test", "t.wav"]), 1);
        assert_eq!(run_command(["noresqa", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        let code = run_command([
            "noresqa".into(),
            "score".into(),
            "--test".into(),
            missing.clone().into_os_string(),
            "--refs".into(),
            missing.clone().into_os_string(),
            "--ckpt".into(),
            missing.into_os_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_config_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"excerpt_s": -1.0}"#).unwrap();
        let code = run_command([
            OsString::from("noresqa"),
            "degrade".into(),
            "--config".into(),
            cfg.into_os_string(),
            "--manifests".into(),
            dir.path().as_os_str().to_owned(),
            "--out".into(),
            dir.path().join("d").into_os_string(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn error_kind_names_the_variant() {
        assert_eq!(error_kind(&Error::InvalidConfig("x".into())), "InvalidConfig");
        assert_eq!(error_kind(&Error::DegenerateTest), "DegenerateTest");
    }
}
