use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use fedpsa::config::{parse_override, parse_raw, set_dotted, validate_config, Config, ExperimentMatrix, StrategyKind, MAX_MATRIX_RUNS};
use fedpsa::metrics::binned_correlation;
use fedpsa::output::{is_complete, write_report, write_run, RunSummary};
use fedpsa::sim::{prepare, simulate};
use fedpsa::{selftest, Error};

#[derive(Debug, Parser)]
#[command(name = "fedpsa", version, about = "Asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a single configuration.
    Run(RunArgs),
    /// Expand an experiment matrix and run every cell.
    Sweep(SweepArgs),
    /// Run FedPSA with the alignment probe and report kappa/alignment correlations.
    Probe(RunArgs),
    /// Aggregate the summaries under a results directory into CSV tables.
    Report(ReportArgs),
    /// Run the built-in numerical self checks.
    Selftest,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration value, e.g. `latency.hi=2500`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VAL")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// TOML experiment matrix with `name`, `[base]` and `[sweep]`.
    #[arg(long)]
    config: PathBuf,
    /// Results root; cells go to `<out>/<name>/<config-hash>/`.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Number of runs executed concurrently.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Override a value in every cell. Repeatable.
    #[arg(long = "override", value_name = "KEY=VAL")]
    overrides: Vec<String>,
    /// Allow matrices larger than the run-count guard.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Results directory to scan for run summaries.
    dir: PathBuf,
    /// Where to write the CSV tables; defaults to the scanned directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn parse_overrides(specs: &[String]) -> Result<Vec<(String, toml::Value)>, Error> {
    specs.iter().map(|s| parse_override(s)).collect()
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config, Error> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut raw = parse_raw(&text)?;
    for (key, value) in parse_overrides(overrides)? {
        set_dotted(&mut raw, &key, value)?;
    }
    validate_config(raw)
}

fn execute(config: &Config, dir: &Path) -> Result<RunSummary, Error> {
    let env = prepare(config, None)?;
    let output = simulate(config, &env)?;
    write_run(dir, config, &output.record)
}

fn print_summary(dir: &Path, s: &RunSummary) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{} {} alpha={} {} seed={} final_accuracy={} aulc={} -> {}",
        s.strategy,
        s.dataset,
        s.alpha,
        s.latency_kind,
        s.seed,
        fmt(s.final_accuracy),
        fmt(s.aulc),
        dir.display()
    );
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new("results").join("runs").join(config.hash()));
    let summary = execute(&config, &dir)?;
    print_summary(&dir, &summary);
    Ok(())
}

fn cmd_probe(args: &RunArgs) -> Result<(), Error> {
    let mut config = load_config(args.config.as_deref(), &args.overrides)?;
    if config.strategy != StrategyKind::FedPsa {
        return Err(Error::Config(vec![format!(
            "the alignment probe needs strategy = \"fedpsa\", got {:?}",
            config.strategy
        )]));
    }
    config.probe.enabled = true;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new("results").join("probe").join(config.hash()));
    let env = prepare(&config, None)?;
    let output = simulate(&config, &env)?;
    let report = binned_correlation(&output.record.probe, config.probe.bin_width)?;
    let summary = write_run(&dir, &config, &output.record)?;
    print_summary(&dir, &summary);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "null".into());
    println!(
        "samples={} pearson_raw={} spearman_raw={} pearson_binned={} spearman_binned={} bins={}",
        output.record.probe.len(),
        fmt(report.pearson_raw),
        fmt(report.spearman_raw),
        fmt(report.pearson_binned),
        fmt(report.spearman_binned),
        report.bins.len()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Io {
        path: args.config.clone(),
        source: e,
    })?;
    let matrix = ExperimentMatrix::from_toml(&text)?;
    let size = matrix.size();
    eprintln!("sweep {:?}: {size} runs", matrix.name);
    if size > MAX_MATRIX_RUNS && !args.force {
        return Err(Error::Config(vec![format!(
            "matrix expands to {size} runs, above the limit of {MAX_MATRIX_RUNS}; pass --force to run it anyway"
        )]));
    }
    let cells = matrix.expand(&parse_overrides(&args.overrides)?)?;
    let root = args.out.join(&matrix.name);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.max(1))
        .build()
        .map_err(|e| Error::Setup(e.to_string()))?;
    let done = AtomicUsize::new(0);
    let failures: Vec<String> = pool.install(|| {
        cells
            .par_iter()
            .filter_map(|config| {
                let dir = root.join(config.hash());
                let result = if is_complete(&dir) {
                    eprintln!("skip {} (already complete)", dir.display());
                    Ok(())
                } else {
                    execute(config, &dir).map(|s| print_summary(&dir, &s))
                };
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!("[{n}/{size}]");
                result.err().map(|e| format!("{}: {e}", dir.display()))
            })
            .collect()
    });
    let report = write_report(&root, &root)?;
    eprintln!("merged {} runs into {}", report.rows.len(), root.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Setup(format!("{} runs failed:\n{}", failures.len(), failures.join("\n"))))
    }
}

fn cmd_report(args: &ReportArgs) -> Result<(), Error> {
    let out = args.out.clone().unwrap_or_else(|| args.dir.clone());
    let report = write_report(&args.dir, &out)?;
    for dir in &report.skipped {
        eprintln!("skipped {} (incomplete summary)", dir.display());
    }
    println!("{} runs summarized into {}", report.rows.len(), out.display());
    Ok(())
}

fn cmd_selftest() -> Result<bool, Error> {
    let results = selftest::run_all();
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    Ok(ok)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimMismatch { .. } => "dim_mismatch",
        Error::Contract(_) => "contract",
        Error::NonFinite { .. } => "non_finite",
        Error::Parse { .. } => "parse",
        Error::Io { .. } => "io",
        Error::Config(_) => "config",
        Error::Setup(_) => "setup",
        Error::Numeric(_) => "numeric",
        Error::Simulation { .. } => "simulation",
        Error::Envelope(_) => "envelope",
    }
}

fn report_error(e: &Error) {
    let mut body = json!({ "error": error_kind(e), "message": e.to_string() });
    match e {
        Error::Config(list) => body["details"] = json!(list),
        Error::Simulation { time, client, source } => {
            body["time"] = json!(time);
            body["client"] = json!(client);
            body["cause"] = json!(source.to_string());
        }
        Error::Io { path, .. } | Error::Parse { path, .. } => body["path"] = json!(path),
        _ => {}
    }
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Report(args) => cmd_report(args),
        Command::Selftest => match cmd_selftest() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
