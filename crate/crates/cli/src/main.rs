//! Command-line entry points: corpus generation, training, evaluation,
//! gradient checking and parameter sweeps.

mod trace;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use contour_marl::diffcore::{inject_fault, DiffError, OpKind};
use contour_marl::gradsuite::{run_suite, SuiteConfig, SuiteError};
use contour_marl::sac::{self, evaluate, evaluate_traced, load_agent, Perturbation, SacConfig, SacError};
use contour_marl::synthdata::{build_corpus, load_corpus, CorpusSpec, KindMix, Sample, SynthError, MANIFEST_NAME};

pub const SEED_ENV: &str = "CONTOUR_MARL_SEED";
const CONFIG_NAME: &str = "config.cfg";
const RUN_INFO_NAME: &str = "run_info.txt";
const NAN_DUMP_NAME: &str = "nan_dump.txt";
const SWEEP_POINTS: [usize; 3] = [32, 64, 128];
const SWEEP_HORIZONS: [usize; 5] = [3, 4, 5, 6, 7];

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::GradCheck(_) => 6,
            CliError::Suite(_) => 1,
            CliError::Synth(e) => match e {
                SynthError::Io { .. } | SynthError::Parse { .. } | SynthError::Tensor(DiffError::Io(_)) => 3,
                SynthError::SizeTooSmall(_) | SynthError::BadNoise(_) | SynthError::EmptyCorpus | SynthError::UnknownKind(_) => 2,
                _ => 1,
            },
            CliError::Sac(e) => match e {
                SacError::Config { .. } | SacError::Invalid(_) | SacError::EmptyCorpus(_) => 2,
                SacError::Io { .. } | SacError::Diff(DiffError::Io(_)) => 3,
                SacError::NonFinite { .. } => 4,
                SacError::CheckpointMismatch(_)
                | SacError::Diff(DiffError::Format(_) | DiffError::Version { .. } | DiffError::MissingParam(_) | DiffError::ParamShape { .. }) => 5,
                _ => 1,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "contour-marl", version, about = "Multi-agent contour evolution for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape corpus.
    Gen(GenArgs),
    /// Train the actor and critics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Evaluate a checkpoint over agent counts and horizons.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shape kinds with optional weights, e.g. `ellipse` or `star:2,blob:1`.
    #[arg(long, default_value = "ellipse")]
    kinds: String,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    blur: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory or manifest.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate; the final rate is capped at this value.
    #[arg(long)]
    lr: Option<f64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    shift_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    scale_frac: f64,
    /// Perturbation seed; defaults to the run seed.
    #[arg(long)]
    perturb_seed: Option<u64>,
    /// Episode horizon override.
    #[arg(long = "horizon", short = 'T')]
    horizon: Option<usize>,
    /// Agent count override.
    #[arg(long = "points", short = 'N')]
    points: Option<usize>,
    /// Per-object CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-episode SVG and CSV traces.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn manifest_path(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.join(MANIFEST_NAME)
    } else {
        corpus.to_path_buf()
    }
}

fn load(corpus: &Path) -> Result<Vec<Sample>, CliError> {
    Ok(load_corpus(&manifest_path(corpus))?)
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_config(path: &Path) -> Result<SacConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(SacConfig::parse(&text)?)
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut spec = CorpusSpec::new(a.count, KindMix::parse(&a.kinds)?, a.size, a.seed);
    spec.noise_sigma = a.noise;
    spec.blur_radius = a.blur;
    let manifest = build_corpus(&spec, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    if a.workers != 1 {
        return Err(CliError::Usage("only --workers 1 (sequential rollouts) is supported".into()));
    }
    let mut config = match &a.config {
        Some(p) => read_config(p)?,
        None => SacConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.lr_init = lr;
        config.lr_final = config.lr_final.min(lr);
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    config.validate()?;
    let corpus = load(&a.corpus)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_file(&a.out.join(CONFIG_NAME), &config.to_config_string())?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_file(
        &a.out.join(RUN_INFO_NAME),
        &format!(
            "started_unix = {stamp}\ncorpus = {}\nresume = {}\n",
            manifest_path(&a.corpus).display(),
            a.resume
        ),
    )?;
    match sac::train(&config, &corpus, &a.out, a.resume) {
        Ok(outcome) => {
            let last = outcome.epochs.last();
            println!(
                "trained {} epochs; last mdice {}",
                outcome.epochs.len(),
                last.map_or(f64::NAN, |s| s.mdice)
            );
            Ok(())
        }
        Err(e @ SacError::NonFinite { .. }) => {
            let dump = a.out.join(NAN_DUMP_NAME);
            let mut text = format!("{e}\n\nconfig:\n{}", config.to_config_string());
            if let Ok(log) = fs::read_to_string(a.out.join(sac::LOG_NAME)) {
                let _ = write!(text, "\nlog:\n{log}");
            }
            write_file(&dump, &text)?;
            eprintln!("diagnostics written to {}", dump.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// The run config stored next to `checkpoint`, with the seed override applied.
fn checkpoint_config(checkpoint: &Path) -> Result<SacConfig, CliError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let mut config = read_config(&dir.join(CONFIG_NAME))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    Ok(config)
}

fn channels(corpus: &[Sample]) -> Result<usize, CliError> {
    corpus
        .first()
        .map(|s| s.grid.channels())
        .ok_or(CliError::Sac(SacError::EmptyCorpus("eval")))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut config = checkpoint_config(&a.checkpoint)?;
    if let Some(t) = a.horizon {
        config.horizon = t;
    }
    if let Some(n) = a.points {
        config.n_points = n;
    }
    config.validate()?;
    let corpus = load(&a.corpus)?;
    let agent = load_agent(&config, channels(&corpus)?, &a.checkpoint)?;
    let perturb = (a.shift_frac != 0.0 || a.scale_frac != 0.0).then(|| Perturbation {
        shift_frac: a.shift_frac,
        scale_frac: a.scale_frac,
        seed: a.perturb_seed.unwrap_or(config.seed),
    });
    let env = config.env_config();
    let out = if a.trace.is_some() {
        evaluate_traced(&agent, &corpus, env, perturb)?
    } else {
        evaluate(&agent, &corpus, env, perturb)?
    };
    println!("run,miou,mdice,mboundf");
    println!("baseline,{},{},{}", out.baseline.miou, out.baseline.mdice, out.baseline.mboundf);
    println!("policy,{},{},{}", out.report.miou, out.report.mdice, out.report.mboundf);
    if let Some(path) = &a.out {
        write_file(path, &trace::object_csv(&out))?;
    }
    if let Some(dir) = &a.trace {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let eval: Vec<&Sample> = corpus
            .iter()
            .filter(|s| s.split == contour_marl::synthdata::Split::Eval)
            .collect();
        for (s, res) in eval.iter().zip(&out.traces) {
            let svg = dir.join(format!("{}.svg", s.id));
            write_file(&svg, &trace::svg(&s.mask, res))?;
            let csv = dir.join(format!("{}.csv", s.id));
            write_file(&csv, &trace::steps_csv(res))?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> Result<(), CliError> {
    if a.trials == 0 || !(a.eps > 0.0) {
        return Err(CliError::Usage("--trials must be positive and --eps > 0".into()));
    }
    if let Some(name) = &a.corrupt_op {
        let kind = OpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))?;
        inject_fault(Some(kind));
    }
    let cfg = SuiteConfig {
        eps: a.eps,
        trials: a.trials,
        threshold: a.threshold,
        seed: a.seed,
    };
    let reports = run_suite(&cfg)?;
    println!("block,instances,max_error,status");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(cfg.threshold);
        println!("{},{},{:e},{}", r.block, r.instances, r.max_error, if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(r.block);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let base = checkpoint_config(&a.checkpoint)?;
    let corpus = load(&a.corpus)?;
    let agent = load_agent(&base, channels(&corpus)?, &a.checkpoint)?;
    let mut csv = String::from("n_points,horizon,miou,mdice,mboundf\n");
    for n in SWEEP_POINTS {
        for t in SWEEP_HORIZONS {
            let mut config = base.clone();
            config.n_points = n;
            config.horizon = t;
            config.validate()?;
            let out = evaluate(&agent, &corpus, config.env_config(), None)?;
            let _ = writeln!(csv, "{n},{t},{},{},{}", out.report.miou, out.report.mdice, out.report.mboundf);
        }
    }
    write_file(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
