//! The `basinmerge` command line.
//!
//! Exit codes: 0 on success, 1 for usage, input or validation errors, 2 for
//! internal failures. Every error is reported as one line on standard error:
//! `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{apply_permutations, weight_matching_detailed, DEFAULT_MAX_SWEEPS};
use crate::buffers::BufferPolicy;
use crate::container::{inspect, validate_compatibility, Checkpoint, DType};
use crate::error::{Error, Result};
use crate::experiments::{run_scenario, ScenarioConfig, ScenarioName};
use crate::merge::{merge, prefix_merge, MergeSpec, Weights};
use crate::metrics::harmonic_mean;
use crate::probe::{sweep, DEFAULT_STEPS};
use crate::runtime::{evaluate, generate_domain, train_from, ArchSpec, Dataset, Init, StatsWindow, SyntheticDomain, TrainConfig};

pub const THREADS_ENV: &str = "BASINMERGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "basinmerge", version, about = "Merge, align and probe checkpoints fine-tuned from shared weights")]
pub struct Cli {
    /// Worker threads for parallel sections (falls back to BASINMERGE_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize a checkpoint as JSON.
    Inspect { ckpt: PathBuf },
    /// Check that two checkpoints can be merged; exits 1 if not.
    Validate { a: PathBuf, b: PathBuf },
    /// Merge checkpoints.
    Merge(MergeArgs),
    /// Permute a target checkpoint's hidden units toward a reference.
    Align(AlignArgs),
    /// Evaluate the linear path between two checkpoints.
    Sweep(SweepArgs),
    /// Accuracy and mIoU of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        data: PathBuf,
        ckpt: PathBuf,
    },
    /// Run a seeded toy scenario.
    Experiment(ExperimentArgs),
    /// Harmonic mean of comma-separated scores.
    Hmean {
        #[arg(value_delimiter = ',', allow_negative_numbers = true, required = true)]
        values: Vec<f64>,
    },
    /// Sample a synthetic domain into a dataset container.
    GenDomain {
        /// Domain description (JSON); its seed is replaced by --seed.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Write freshly initialized weights for an architecture.
    Init {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: CliDType,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Train a checkpoint on a dataset.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum CliDType {
    F32,
    F64,
}

impl From<CliDType> for DType {
    fn from(d: CliDType) -> DType {
        match d {
            CliDType::F32 => DType::F32,
            CliDType::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Weight of the first of two inputs.
    #[arg(long, conflicts_with = "weights")]
    pub lambda: Option<f64>,
    /// One weight per input, summing to 1 (default: equal).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Merge only tensors under this prefix; repeatable. Writes one output per input.
    #[arg(long = "prefix")]
    pub prefixes: Vec<String>,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub buffers: BufferPolicy,
    #[arg(required = true, num_args = 2..)]
    pub inputs: Vec<PathBuf>,
    #[arg(short = 'o', long = "out", conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Output directory (spelled `-o-dir` or `--o-dir`).
    #[arg(long = "o-dir")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_SWEEPS)]
    pub max_sweeps: usize,
    /// Write the permuted target to -o.
    #[arg(long, requires = "out")]
    pub apply: bool,
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub perms_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub arch: PathBuf,
    /// JSON list of `{"tag": ..., "path": ...}`; relative paths resolve
    /// against the file's directory.
    #[arg(long)]
    pub domains: PathBuf,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub buffers: BufferPolicy,
    /// Model at λ = 1.
    pub a: PathBuf,
    /// Model at λ = 0.
    pub b: PathBuf,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioName,
    /// Comma-separated seeds; `a-b` denotes an inclusive range.
    #[arg(long)]
    pub seeds: String,
    /// Scenario configuration template (JSON); name and seeds are overridden.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Shuffling seed; also the initialization seed unless --init is given.
    #[arg(long)]
    pub seed: u64,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: CliDType,
    /// Domain tag recorded in the checkpoint metadata.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainRef {
    pub tag: String,
    pub path: PathBuf,
}

/// Parses `1,2,5-8`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Validation(format!("cannot parse seed list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_arch(path: &Path) -> Result<ArchSpec> {
    ArchSpec::from_json(&read_text(path)?)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// `-o-dir` is accepted as a spelling of `--o-dir`.
fn normalize(argv: impl IntoIterator<Item = OsString>) -> Vec<OsString> {
    argv.into_iter().map(|a| if a == "-o-dir" { OsString::from("--o-dir") } else { a }).collect()
}

fn merge_spec(args: &MergeArgs) -> MergeSpec {
    let n = args.inputs.len();
    let weights = match (&args.lambda, &args.weights) {
        (Some(l), _) => Weights::Lambda(*l),
        (None, Some(w)) => Weights::Explicit(w.clone()),
        (None, None) if n == 2 => Weights::Lambda(0.5),
        (None, None) => Weights::Explicit(vec![1.0 / n as f64; n]),
    };
    MergeSpec { weights, prefixes: args.prefixes.clone(), buffer_policy: args.buffers }
}

/// One output file name per input, from the input file names; repeated
/// names get an index prefix.
fn output_names(inputs: &[PathBuf]) -> Vec<String> {
    let names: Vec<String> = inputs
        .iter()
        .map(|p| p.file_name().map_or_else(|| "model.tmc".into(), |n| n.to_string_lossy().into_owned()))
        .collect();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| if names.iter().filter(|m| *m == n).count() > 1 { format!("{i}_{n}") } else { n.clone() })
        .collect()
}

fn cmd_merge(args: &MergeArgs) -> Result<String> {
    let ckpts = args.inputs.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let spec = merge_spec(args);
    if spec.prefixes.is_empty() {
        let out = args
            .out
            .as_ref()
            .ok_or_else(|| Error::Validation("merge needs -o OUT (use -o-dir with --prefix)".into()))?;
        merge(&refs, &spec)?.save(out)?;
        return Ok(String::new());
    }
    let dir = args
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Validation("prefix merge writes one file per input; give -o-dir DIR".into()))?;
    let outputs = prefix_merge(&refs, &spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut report = String::new();
    for (out, name) in outputs.iter().zip(output_names(&args.inputs)) {
        let path = dir.join(&name);
        out.save(&path)?;
        report.push_str(&format!("{}\n", path.display()));
    }
    if let Some(w) = outputs.first().and_then(|o| o.meta.get("merge.warning")) {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

#[derive(Serialize)]
struct AlignSummary {
    per_layer: Vec<Vec<usize>>,
    identity: bool,
    sweeps: usize,
    converged: bool,
    objective: Vec<f64>,
}

fn cmd_align(args: &AlignArgs) -> Result<String> {
    let arch = load_arch(&args.arch)?;
    let reference = Checkpoint::load(&args.reference)?;
    let target = Checkpoint::load(&args.target)?;
    let outcome = weight_matching_detailed(&reference, &target, &arch, args.max_sweeps)?;
    if let Some(p) = &args.perms_out {
        write_text(p, &(outcome.perms.to_json()? + "\n"))?;
    }
    if args.apply {
        let out = args.out.as_ref().expect("clap enforces -o with --apply");
        apply_permutations(&target, &outcome.perms, &arch)?.save(out)?;
    }
    pretty(&AlignSummary {
        per_layer: outcome.perms.per_layer.iter().map(|p| p.map().to_vec()).collect(),
        identity: outcome.perms.is_identity(),
        sweeps: outcome.sweeps,
        converged: outcome.converged,
        objective: outcome.objective,
    })
}

fn load_domains(spec: &Path) -> Result<Vec<(String, Dataset)>> {
    let refs: Vec<DomainRef> = serde_json::from_str(&read_text(spec)?)?;
    let base = spec.parent().unwrap_or(Path::new(""));
    refs.into_iter()
        .map(|r| {
            let path = if r.path.is_absolute() { r.path } else { base.join(r.path) };
            Ok((r.tag, Dataset::load(path)?))
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let arch = load_arch(&args.arch)?;
    let a = Checkpoint::load(&args.a)?;
    let b = Checkpoint::load(&args.b)?;
    let domains = load_domains(&args.domains)?;
    let mut report = sweep(&a, &b, &domains, &arch, args.steps, args.buffers)?;
    report.meta.insert("a".into(), args.a.display().to_string());
    report.meta.insert("b".into(), args.b.display().to_string());
    report.write(&args.out)?;
    Ok(format!("barrier {:.4}\n", report.barrier))
}

#[derive(Serialize)]
struct EvalSummary {
    accuracy: f64,
    miou: f64,
    samples: u64,
}

fn cmd_eval(arch: &Path, data: &Path, ckpt: &Path) -> Result<String> {
    let e = evaluate(&load_arch(arch)?, &Checkpoint::load(ckpt)?, &Dataset::load(data)?)?;
    pretty(&EvalSummary { accuracy: e.accuracy, miou: e.miou, samples: e.samples })
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<String> {
    let seeds = parse_seeds(&args.seeds)?;
    let cfg = match &args.config {
        Some(p) => {
            let t: ScenarioConfig = serde_json::from_str(&read_text(p)?)?;
            ScenarioConfig { name: args.scenario, seeds, ..t }
        }
        None => ScenarioConfig::new(args.scenario, seeds),
    };
    let report = run_scenario(&cfg)?;
    report.write(&args.out)?;
    pretty(&report.summary)
}

fn cmd_train(args: &TrainArgs) -> Result<String> {
    let arch = load_arch(&args.arch)?;
    let data = Dataset::load(&args.data)?;
    let init = match &args.init {
        Some(p) => Init::FromCheckpoint { path: p.clone() },
        None => Init::FreshRandom { seed: args.seed },
    };
    let start = match &init {
        Init::FreshRandom { seed } => arch.init_checkpoint(*seed, DType::F64)?,
        Init::FromCheckpoint { path } => Checkpoint::load(path)?,
    };
    let cfg = TrainConfig {
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        init,
        dtype: args.dtype.into(),
        stats_window: StatsWindow::Epoch,
    };
    let mut out = train_from(&arch, &data, &cfg, &start)?;
    if let Some(d) = &args.domain {
        out.meta.insert("domain".into(), d.clone());
    }
    out.save(&args.out)?;
    Ok(String::new())
}

fn execute(command: &Command) -> Result<(String, i32)> {
    let ok = |s: String| Ok((s, 0));
    match command {
        Command::Inspect { ckpt } => ok(pretty(&inspect(&Checkpoint::load(ckpt)?))?),
        Command::Validate { a, b } => {
            let report = validate_compatibility(&Checkpoint::load(a)?, &Checkpoint::load(b)?);
            let code = if report.compatible { 0 } else { 1 };
            Ok((pretty(&report)?, code))
        }
        Command::Merge(args) => ok(cmd_merge(args)?),
        Command::Align(args) => ok(cmd_align(args)?),
        Command::Sweep(args) => ok(cmd_sweep(args)?),
        Command::Eval { arch, data, ckpt } => ok(cmd_eval(arch, data, ckpt)?),
        Command::Experiment(args) => ok(cmd_experiment(args)?),
        Command::Hmean { values } => ok(format!("{:.4}\n", harmonic_mean(values)?)),
        Command::GenDomain { spec, seed, out } => {
            let d: SyntheticDomain = serde_json::from_str(&read_text(spec)?)?;
            let data = generate_domain(&SyntheticDomain { seed: *seed, ..d })?;
            let mut c = data.to_checkpoint()?;
            c.meta.insert("seed".into(), seed.to_string());
            c.save(out)?;
            ok(String::new())
        }
        Command::Init { arch, seed, dtype, out } => {
            load_arch(arch)?.init_checkpoint(*seed, (*dtype).into())?.save(out)?;
            ok(String::new())
        }
        Command::Train(args) => ok(cmd_train(args)?),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Validation("thread count must be at least 1".into()));
        }
        // A pool may already exist when running in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn report_error(kind: &str, msg: &str) {
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{kind}]: {line}");
}

/// Writes to stdout; a closed pipe is not an error worth reporting.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(normalize(argv)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                emit(&e.to_string());
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report_error("usage", &format!("{first} (see --help)"));
            return 1;
        }
    };
    let result = configure_threads(cli.threads).and_then(|_| execute(&cli.command));
    match result {
        Ok((out, code)) => {
            emit(&out);
            code
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2,5-7").unwrap(), vec![1, 2, 5, 6, 7]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn output_names_disambiguate() {
        let names = output_names(&[PathBuf::from("a/m.tmc"), PathBuf::from("b/m.tmc"), PathBuf::from("c.tmc")]);
        assert_eq!(names, vec!["0_m.tmc", "1_m.tmc", "c.tmc"]);
    }

    #[test]
    fn dash_o_dir_spelling() {
        let argv = normalize(["basinmerge", "merge", "--prefix", "l1.", "a", "b", "-o-dir", "out"].map(OsString::from));
        let cli = Cli::try_parse_from(argv).unwrap();
        match cli.command {
            Command::Merge(m) => assert_eq!(m.out_dir, Some(PathBuf::from("out"))),
            other => panic!("{other:?}"),
        }
    }
}
