//! Command-line front end: index building, rule generation, scanning,
//! evaluation and synthetic benchmark generation.

pub mod synth;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use sigforge_core::bloom_index::{self, BloomIndex, IndexParams};
use sigforge_core::corpus::{scan_corpus, stream_bytes, CorpusManifest};
use sigforge_core::rulegen::{self, RuleOutcome, RulegenParams, ThresholdMode};
use sigforge_core::ruleval::{self, Matcher};
use sigforge_core::Error as CoreError;

use synth::SynthParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NO_RULE: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;

pub const THREADS_ENV: &str = "SIGFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sigforge", version, about = "Yara rule synthesis from byte n-grams")]
pub struct Cli {
    /// TOML file with default values for flags; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the background gram index from a training corpus.
    BuildIndex(BuildIndexArgs),
    /// Generate a rule for a directory of related samples.
    Generate(GenerateArgs),
    /// Print every file under a directory that a rule matches.
    Scan(ScanArgs),
    /// Score a rule against positive and negative directories.
    Eval(EvalArgs),
    /// Write a labelled synthetic benchmark.
    SynthBench(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long, value_name = "DIR")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Grams kept per size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub min_doc_frac: Option<f64>,
    /// Hash seed stored in the index.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "DIR")]
    pub samples: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Rule identifier; defaults to the samples directory name.
    #[arg(long, value_name = "IDENT")]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "high-group|split-index")]
    pub threshold_mode: Option<ThresholdMode>,
    #[arg(long)]
    pub k_per_n: Option<usize>,
    #[arg(long)]
    pub max_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, value_name = "FILE")]
    pub rule: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub target: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub rule: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub positives: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub negatives: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub families: Option<usize>,
    #[arg(long)]
    pub files_per_family: Option<usize>,
    #[arg(long)]
    pub heldout_per_family: Option<usize>,
    #[arg(long)]
    pub plants_per_family: Option<usize>,
    #[arg(long)]
    pub plant_len: Option<usize>,
    #[arg(long)]
    pub benign: Option<usize>,
    #[arg(long)]
    pub background: Option<usize>,
    /// Files per subfamily in the two-subfamily scenario.
    #[arg(long)]
    pub subfamily_files: Option<usize>,
    #[arg(long)]
    pub file_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Values a config file may supply. Keys match the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub min_doc_frac: Option<f64>,
    pub threshold_mode: Option<String>,
    pub k_per_n: Option<usize>,
    pub max_n: Option<usize>,
    pub beta: Option<f64>,
    pub families: Option<usize>,
    pub files_per_family: Option<usize>,
    pub heldout_per_family: Option<usize>,
    pub plants_per_family: Option<usize>,
    pub plant_len: Option<usize>,
    pub benign: Option<usize>,
    pub background: Option<usize>,
    pub subfamily_files: Option<usize>,
    pub file_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| anyhow!(CoreError::Argument(format!("config {}: {e}", path.display()))))
    }
}

/// Marker for a generate run that finished without a rule.
#[derive(Debug)]
pub struct NoRuleProduced(pub String);

impl std::fmt::Display for NoRuleProduced {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no rule produced:\n{}", self.0.trim_end())
    }
}

impl std::error::Error for NoRuleProduced {}

/// Maps an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<NoRuleProduced>() {
            return EXIT_NO_RULE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io { .. } => EXIT_IO,
                CoreError::Integrity(_)
                | CoreError::Format(_)
                | CoreError::Unsupported { .. }
                | CoreError::Reference(_)
                | CoreError::Parse { .. } => EXIT_FORMAT,
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CoreError::Argument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")).into()),
        },
        _ => Ok(None),
    }
}

/// Parses `args` (including the program name) and runs one command. Returns
/// the exit status; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{text}");
                EXIT_OK
            } else {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Installs the logger once per process; later calls are no-ops.
fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let config = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let dispatch = |out: &mut dyn Write, err: &mut dyn Write| -> Result<()> {
        match &cli.command {
            Command::BuildIndex(a) => cmd_build_index(a, &config, out),
            Command::Generate(a) => cmd_generate(a, &config, out, err),
            Command::Scan(a) => cmd_scan(a, out),
            Command::Eval(a) => cmd_eval(a, &config, out),
            Command::SynthBench(a) => cmd_synth_bench(a, &config, out),
        }
    };
    match threads_from_env()? {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("starting worker pool")?;
            // the worker pool needs Send writers, so output is buffered
            let (mut o, mut e) = (Vec::new(), Vec::new());
            let result = pool.install(|| dispatch(&mut o, &mut e));
            out.write_all(&o)?;
            err.write_all(&e)?;
            result
        }
        None => dispatch(out, err),
    }
}

pub fn cmd_build_index(a: &BuildIndexArgs, config: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let defaults = IndexParams::default();
    let params = IndexParams {
        k: a.k.or(config.k).unwrap_or(defaults.k),
        min_doc_frac: a.min_doc_frac.or(config.min_doc_frac).unwrap_or(defaults.min_doc_frac),
        seed: a.seed.or(config.seed).unwrap_or(defaults.seed),
        ..defaults
    };
    let corpus = scan_corpus(&a.train, true, false)?;
    let index = bloom_index::build_index(&corpus, &params)?;
    index.save(&a.out)?;
    writeln!(
        out,
        "index over {} files written to {}",
        index.train_file_count,
        a.out.display()
    )?;
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs, config: &FileConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let defaults = RulegenParams::default();
    let threshold_mode = match (&a.threshold_mode, &config.threshold_mode) {
        (Some(m), _) => *m,
        (None, Some(text)) => text.parse()?,
        (None, None) => defaults.threshold_mode,
    };
    let params = RulegenParams {
        k_per_n: a.k_per_n.or(config.k_per_n).unwrap_or(defaults.k_per_n),
        max_n: a.max_n.or(config.max_n).unwrap_or(defaults.max_n),
        threshold_mode,
        seed: a.seed.or(config.seed).unwrap_or(defaults.seed),
        ..defaults
    };
    let samples = match scan_corpus(&a.samples, true, true) {
        Ok(m) => m,
        Err(CoreError::EmptyCorpus(_)) => bail!(CoreError::Argument("need ≥ 2 samples, found 0".into())),
        Err(e) => return Err(e.into()),
    };
    if samples.len() < 2 {
        bail!(CoreError::Argument(format!("need ≥ 2 samples, found {}", samples.len())));
    }
    let name = match &a.name {
        Some(n) => n.clone(),
        None => samples.label.clone().unwrap_or_else(|| "generated".into()),
    };
    let index = BloomIndex::load(&a.index)?;
    match rulegen::build_yara_rule(&samples, &index, &name, &params)? {
        RuleOutcome::Rule(generated) => {
            let text = rulegen::emit_yara(&generated.rule);
            fs::write(&a.out, &text).map_err(|e| CoreError::Io {
                path: a.out.clone(),
                source: e,
            })?;
            let p = &generated.provenance;
            writeln!(
                out,
                "rule {} written to {}",
                rulegen::sanitize_identifier(&generated.rule.name),
                a.out.display()
            )?;
            writeln!(
                out,
                "n={} normalization={} coverage={:.4} features={} score={:.4} biclusters={} clauses={} fallback={}",
                p.n,
                p.normalization,
                p.score.coverage,
                p.score.distinct_features,
                p.score.score,
                p.biclusters,
                generated.rule.clauses.len(),
                p.fallback_used
            )?;
            Ok(())
        }
        RuleOutcome::NoRule { attempts } => {
            let reason = rulegen::describe_attempts(&attempts);
            let _ = err.flush();
            Err(NoRuleProduced(reason).into())
        }
    }
}

fn read_rule(path: &Path) -> Result<sigforge_core::rulegen::YaraRule> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(ruleval::parse_rule(&text)?)
}

/// Files under `dir`, or none for an empty directory.
fn corpus_or_empty(dir: &Path) -> Result<Option<CorpusManifest>> {
    match scan_corpus(dir, true, false) {
        Ok(m) => Ok(Some(m)),
        Err(CoreError::EmptyCorpus(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_scan(a: &ScanArgs, out: &mut dyn Write) -> Result<()> {
    let rule = read_rule(&a.rule)?;
    let matcher = Matcher::new(&rule)?;
    let Some(corpus) = corpus_or_empty(&a.target)? else {
        return Ok(());
    };
    let verdicts: Vec<bool> = corpus
        .samples
        .par_iter()
        .map(|s| Ok(matcher.scan(&stream_bytes(s, false)?).matched))
        .collect::<Result<_, CoreError>>()?;
    let name = rulegen::sanitize_identifier(&rule.name);
    for (s, hit) in corpus.samples.iter().zip(verdicts) {
        if hit {
            writeln!(out, "{}\t{}", s.path.display(), name)?;
        }
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, config: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let beta = a.beta.or(config.beta).unwrap_or(ruleval::DEFAULT_BETA);
    let rule = read_rule(&a.rule)?;
    let positives = corpus_or_empty(&a.positives)?
        .ok_or_else(|| CoreError::Argument(format!("no positive samples under {}", a.positives.display())))?;
    let report = match corpus_or_empty(&a.negatives)? {
        Some(neg) => ruleval::evaluate(&rule, &positives, &neg, beta)?,
        None => ruleval::evaluate(&rule, &positives, &[] as &[Vec<u8>], beta)?,
    };
    write!(out, "{}", report.to_csv())?;
    Ok(())
}

pub fn cmd_synth_bench(a: &SynthArgs, config: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let d = SynthParams::default();
    let params = SynthParams {
        families: a.families.or(config.families).unwrap_or(d.families),
        files_per_family: a.files_per_family.or(config.files_per_family).unwrap_or(d.files_per_family),
        heldout_per_family: a.heldout_per_family.or(config.heldout_per_family).unwrap_or(d.heldout_per_family),
        plants_per_family: a.plants_per_family.or(config.plants_per_family).unwrap_or(d.plants_per_family),
        plant_len: a.plant_len.or(config.plant_len).unwrap_or(d.plant_len),
        benign: a.benign.or(config.benign).unwrap_or(d.benign),
        background: a.background.or(config.background).unwrap_or(d.background),
        subfamily_files: a.subfamily_files.or(config.subfamily_files).unwrap_or(d.subfamily_files),
        file_size: a.file_size.or(config.file_size).unwrap_or(d.file_size),
        seed: a.seed.or(config.seed).unwrap_or(d.seed),
    };
    let layout = synth::generate_bench(&a.out, &params)?;
    writeln!(
        out,
        "benchmark written to {} ({} families, {} benign, {} background)",
        layout.root.display(),
        layout.families.len(),
        params.benign,
        params.background
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let io = anyhow::Error::from(CoreError::Io {
            path: "x".into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        });
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&CoreError::Argument("a".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&CoreError::Integrity("crc".into()).into()), EXIT_FORMAT);
        assert_eq!(exit_code(&NoRuleProduced("r".into()).into()), EXIT_NO_RULE);
        let wrapped = anyhow::Error::from(CoreError::Parse { line: 1, message: "m".into() }).context("reading rule");
        assert_eq!(exit_code(&wrapped), EXIT_FORMAT);
    }

    #[test]
    fn config_keys_are_kebab_case() {
        let c: FileConfig = toml::from_str("seed = 9\nthreshold-mode = \"split-index\"\nk-per-n = 64").unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.k_per_n, Some(64));
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["sigforge", "nope"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["sigforge", "scan", "--rule"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["sigforge", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
