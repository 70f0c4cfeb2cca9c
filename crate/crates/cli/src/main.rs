use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use turnover::data::Split;
use turnover::experiment::{execute, replay, Command, ExperimentConfig, Manifest, RunOptions};
use turnover::influence::Estimator;
use turnover::Error;

#[derive(Parser)]
#[command(name = "turnover", version, about = "Influence estimation with turn-over dropout")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with turn-over masks and write checkpoint.json.
    Train(Common),
    /// Retrain while logging per-epoch masked, flipped, full and test losses.
    Curves(Common),
    /// Influence of every training instance on each target.
    Influence(Common),
    /// Influence of each training instance on itself, with a histogram.
    SelfInfluence(Common),
    /// Top-k training instances behind each misclassified instance.
    Interpret(Common),
    /// Compare estimates with leave-one-out retraining.
    LooValidate(Common),
    /// Remove the most harmful instances and retrain.
    Cleanse(Common),
    /// Summarize the CSV files of a run directory.
    Report(Common),
    /// Rerun every command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config; defaults to <out>/config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets the init, shuffle and mask seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Allow leave-one-out runs above the size limit.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Split searched for misclassified instances by `interpret`.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Standard,
    FullnetBaseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 1,
        Error::Precondition(_) | Error::NoTurnover | Error::SchemeMismatch => 3,
        _ => 2,
    }
}

fn effective_config(c: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let path = match (&c.config, &c.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join("config.json"),
        (None, None) => return Err(Failure::Usage("give --config or --out".into())),
    };
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| Failure::Usage(format!("cannot load config: {e}")))?;
    if let Some(seed) = c.seed {
        cfg.train.init_seed = seed;
        cfg.train.shuffle_seed = seed;
        cfg.mask.global_seed = seed;
    }
    if c.force {
        cfg.loo.force = true;
    }
    if let Some(f) = c.fraction {
        cfg.cleansing.fraction = f;
    }
    if let Some(k) = c.top_k {
        cfg.analysis.top_k = k;
    }
    if let Some(e) = c.estimator {
        cfg.analysis.estimator = match e {
            EstimatorArg::Standard => Estimator::Standard,
            EstimatorArg::FullnetBaseline => Estimator::FullnetBaseline,
        };
    }
    if let Some(s) = c.split {
        cfg.analysis.interpret_split = match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        };
    }
    let out = match (&c.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(Failure::Usage("no run directory: give --out or set out_dir".into())),
    };
    Ok((cfg, out))
}

fn run_one(command: Command, c: &Common) -> Result<(), Failure> {
    let (cfg, out) = effective_config(c)?;
    let entry = execute(command, &cfg, &out, RunOptions { jobs: c.jobs.max(1) })?;
    for f in &entry.outputs {
        println!("{}", Path::new(&out).join(&f.path).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (command, common) = match cli.command {
        Cmd::Replay { manifest, out, jobs } => {
            let m = Manifest::load(&manifest).map_err(|e| Failure::Usage(format!("cannot load manifest: {e}")))?;
            for entry in replay(&m, &out, RunOptions { jobs: jobs.max(1) })? {
                println!("{}: {} outputs", entry.command.name(), entry.outputs.len());
            }
            return Ok(());
        }
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Curves(c) => (Command::Curves, c),
        Cmd::Influence(c) => (Command::Influence, c),
        Cmd::SelfInfluence(c) => (Command::SelfInfluence, c),
        Cmd::Interpret(c) => (Command::Interpret, c),
        Cmd::LooValidate(c) => (Command::LooValidate, c),
        Cmd::Cleanse(c) => (Command::Cleanse, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    run_one(command, &common)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
