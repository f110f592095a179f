use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itergrid_cli::config::{emit, parse_config, ExperimentConfig};
use itergrid_cli::report::{report, ReportOptions};
use itergrid_cli::{run, CliError, Result, RunOptions};

/// Experiments on procedural gridworlds and the supervised non-stationarity lab.
#[derive(Parser)]
#[command(name = "itergrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an rl_ppo, rl_iter, sl_run, sl_two_phase or distill_sl experiment.
    Train(RunArgs),
    /// Run an sl_sweep experiment.
    Sweep(RunArgs),
    /// Run a probe experiment.
    Probe(RunArgs),
    /// Run a spectrum experiment.
    Spectrum(RunArgs),
    /// Plot metrics of one or more run directories and tabulate normalised finals.
    Report(ReportArgs),
    /// Parse and validate a config, then print it with all defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Run directory; defaults to `$ITERGRID_OUT/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    #[arg(long)]
    resume: bool,
    #[arg(long, hide = true)]
    halt_after: Option<u64>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare; the first is the normalisation baseline unless --baseline is given.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Comma-separated metric columns.
    #[arg(long, value_delimiter = ',', required = true)]
    metric: Vec<String>,
    /// Column for the x axis.
    #[arg(long)]
    x: Option<String>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run_dir(args: &RunArgs, config: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    if let Some(out) = &config.out {
        return out.clone();
    }
    let root = std::env::var_os("ITERGRID_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let name = args.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    root.join(name)
}

fn execute(command: &str, args: &RunArgs) -> Result<()> {
    let mut config = parse_config(&args.config)?;
    if config.command() != command {
        return Err(CliError::Config(format!(
            "kind {} runs with `itergrid {}`, not `itergrid {command}`",
            config.kind.name(),
            config.command()
        )));
    }
    if !args.seed.is_empty() {
        config.seeds = args.seed.clone();
    }
    let dir = run_dir(args, &config);
    config.out = Some(dir.clone());
    config.validate()?;
    let opts = RunOptions { force: args.force, resume: args.resume, halt_after: args.halt_after, verbose: !args.quiet };
    let summary = run(&config, &dir, &opts)?;
    for (name, agg) in &summary.metrics {
        println!("{name}: {:.6} ± {:.6} (n={})", agg.mean, agg.stderr, agg.n);
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn execute_report(args: &ReportArgs) -> Result<()> {
    let baseline = match &args.baseline {
        None => 0,
        Some(b) => args
            .runs
            .iter()
            .position(|r| same_path(r, b))
            .ok_or_else(|| CliError::Usage(format!("baseline {} is not among the run directories", b.display())))?,
    };
    let opts = ReportOptions { metrics: args.metric.clone(), x: args.x.clone(), baseline, out: args.out.clone() };
    let out = report(&args.runs, &opts)?;
    for svg in &out.svgs {
        println!("{}", svg.display());
    }
    println!("{}", out.table.display());
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Prints to stdout, treating a closed pipe as success.
fn print_stdout(text: &str) -> Result<(), CliError> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => execute("train", a),
        Command::Sweep(a) => execute("sweep", a),
        Command::Probe(a) => execute("probe", a),
        Command::Spectrum(a) => execute("spectrum", a),
        Command::Report(a) => execute_report(a),
        Command::ValidateConfig { config } => parse_config(config).and_then(|c| print_stdout(&emit(&c))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
