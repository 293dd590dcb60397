//! Command-line driver: cohort generation, the experiment tables, slice
//! registration demo, qualitative report and dropout search.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("filesystem error: {0}")]
    Io(String),
    #[error("{0}")]
    Compute(String),
    #[error(transparent)]
    Core(#[from] mishape::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mishape", version, about = "Infarction classification from 3D ventricle point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort: subject files, manifest and a summary.
    Generate(CommonArgs),
    /// Run the experiment cells and write results, ROC curves and tables.
    Run(CommonArgs),
    /// Slice, misalign and re-register subjects; report recovery errors.
    AlignDemo(CommonArgs),
    /// Best and worst cases of a finished run, with shape summaries.
    Report(CommonArgs),
    /// Dropout grid search for the selected network cells.
    GridSearch(CommonArgs),
    /// List every config key with its default.
    Keys,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// key=value config file; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Only write progress to run.log.
    #[arg(long)]
    quiet: bool,
    /// Config overrides as `--key-name value`; see `mishape keys`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    settings: Vec<String>,
}

fn build_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_flags(&args.settings)?;
    Ok(cfg)
}

fn init_pool(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let (args, report) = match &command {
        Command::Keys => {
            print!("{}", config::keys_help());
            return Ok(());
        }
        Command::Report(a) => (a, true),
        Command::Generate(a) | Command::Run(a) | Command::AlignDemo(a) | Command::GridSearch(a) => (a, false),
    };
    init_pool(args.jobs)?;
    let mut cfg = build_config(args)?;
    if report {
        // the run's echoed config is the base; explicit settings still win
        let saved = cfg.results_dir().join("config.txt");
        let mut base = RunConfig::default();
        base.apply_file(&saved)
            .map_err(|e| CliError::Config(format!("{e}; point --results-dir at the output of `mishape run`")))?;
        if let Some(p) = &args.config {
            base.apply_file(p)?;
        }
        base.apply_flags(&args.settings)?;
        cfg = base;
    }
    cfg.validate()?;
    let quiet = args.quiet;
    match command {
        Command::Generate(_) => commands::generate(&cfg, quiet),
        Command::Run(_) => commands::run(&cfg, quiet),
        Command::AlignDemo(_) => commands::align_demo(&cfg, quiet),
        Command::Report(_) => commands::report(&cfg, quiet),
        Command::GridSearch(_) => commands::grid_search(&cfg, quiet),
        Command::Keys => Ok(()),
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 1 when a computation fails, 2 on config or usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
