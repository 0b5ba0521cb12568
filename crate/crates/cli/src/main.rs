use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oedopf::autotune::{fit_inverse_tradeoff, pareto_filter, read_sweep_csv, write_sweep_csv, AutotuneError};
use oedopf::case_io::{case5, CaseError, ConfigError};
use oedopf::runner::{run_batch, write_iterations_csv, write_summary_json, RunError, RunSummary};
use oedopf::{parse_experiment_config, parse_matpower_case, parse_native_case, ExperimentConfig, GridCase, Strategy};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("case: {0}")]
    Case(#[from] CaseError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Autotune(#[from] AutotuneError),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

#[derive(Parser)]
#[command(name = "oedopf", version, about = "Cost-aware experiment design for line-parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy for one or more seeds.
    Run(RunArgs),
    /// Run all three strategies on shared seeds.
    Compare(CommonArgs),
    /// Export the trade-off sweep taken after the first estimate.
    Sweep(CommonArgs),
    /// Fit the inverse trade-off curve to a sweep CSV.
    Fit(FitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CommonArgs {
    /// MATPOWER (.m) or native TOML case; defaults to the bundled five-bus case.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; overrides `rng_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Drop the direct measurement-parameter term from the sensitivity.
    #[arg(long)]
    paper_strict_sensitivity: bool,
    /// Redo the trade-off sweep and fit every this many steps.
    #[arg(long)]
    refit_every: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// opf_mle, pure_oed or oed_opf_autotuned; overrides the config.
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct FitArgs {
    /// Sweep CSV as written by `sweep`.
    sweep: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn load_case(path: Option<&Path>) -> Result<GridCase, CliError> {
    let Some(path) = path else { return Ok(case5()) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let case = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => parse_native_case(&text)?,
        _ => parse_matpower_case(&text)?,
    };
    Ok(case)
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => parse_experiment_config(&fs::read_to_string(path).map_err(io_err(path))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    if args.paper_strict_sensitivity {
        config.paper_strict_sensitivity = true;
    }
    if let Some(n) = args.refit_every {
        config.refit_every = n;
    }
    config.validate()?;
    Ok(config)
}

fn seeds(args: &CommonArgs, config: &ExperimentConfig) -> Result<Vec<u64>, CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    Ok((config.rng_seed..config.rng_seed + args.seeds).collect())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_run(out: &Path, format: Format, summary: &RunSummary) -> Result<PathBuf, CliError> {
    let stem = format!("{}_seed{}", summary.strategy, summary.seed);
    let path = match format {
        Format::Csv => out.join(format!("{stem}.csv")),
        Format::Json => out.join(format!("{stem}.json")),
    };
    let mut w = create(&path)?;
    match format {
        Format::Csv => write_iterations_csv(&summary.records, &mut w)?,
        Format::Json => write_summary_json(summary, &mut w)?,
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

fn report(summary: &RunSummary) {
    let last = summary.final_record();
    println!(
        "{:<18} seed {:>3}: {:>2} steps ({:.2} h), {:?}, Tr(V) {:.4e}, cost {:.1}, MRE_g {:.4}, MRE_b {:.4}{}",
        summary.strategy.name(),
        summary.seed,
        summary.terminated_at,
        summary.hours,
        summary.reason,
        last.map_or(f64::NAN, |r| r.trace_v),
        last.map_or(0.0, |r| r.cumulative_cost),
        last.map_or(f64::NAN, |r| r.mre_g),
        last.map_or(f64::NAN, |r| r.mre_b),
        summary.error.as_deref().map(|e| format!(" [{e}]")).unwrap_or_default(),
    );
}

fn run_strategies(args: &CommonArgs, strategies: &[Strategy], override_strategy: bool) -> Result<(), CliError> {
    let case = load_case(args.case.as_deref())?;
    let base = load_config(args)?;
    let seeds = seeds(args, &base)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let mut summaries = Vec::new();
    for &strategy in strategies {
        let config = ExperimentConfig { strategy: if override_strategy { strategy } else { base.strategy }, ..base.clone() };
        for result in run_batch(&case, &config, &seeds) {
            let summary = result?;
            report(&summary);
            let path = write_run(&args.out, args.format, &summary)?;
            log::info!("wrote {}", path.display());
            summaries.push(summary);
        }
    }
    if strategies.len() > 1 {
        write_comparison(&args.out, args.format, &summaries)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct ComparisonRow {
    strategy: Strategy,
    seed: u64,
    terminated_at: usize,
    reason: oedopf::runner::TerminationReason,
    hours: f64,
    trace_v: f64,
    cumulative_cost: f64,
    mre_g: f64,
    mre_b: f64,
}

fn write_comparison(out: &Path, format: Format, summaries: &[RunSummary]) -> Result<(), CliError> {
    let rows: Vec<ComparisonRow> = summaries
        .iter()
        .map(|s| {
            let last = s.final_record();
            ComparisonRow {
                strategy: s.strategy,
                seed: s.seed,
                terminated_at: s.terminated_at,
                reason: s.reason,
                hours: s.hours,
                trace_v: last.map_or(f64::NAN, |r| r.trace_v),
                cumulative_cost: last.map_or(0.0, |r| r.cumulative_cost),
                mre_g: last.map_or(f64::NAN, |r| r.mre_g),
                mre_b: last.map_or(f64::NAN, |r| r.mre_b),
            }
        })
        .collect();
    let output = |e: String| CliError::Run(RunError::Output(e));
    match format {
        Format::Csv => {
            let path = out.join("compare.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            for row in &rows {
                w.serialize(row).map_err(|e| output(e.to_string()))?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        Format::Json => {
            let path = out.join("compare.json");
            let mut w = create(&path)?;
            serde_json::to_writer_pretty(&mut w, &rows).map_err(|e| output(e.to_string()))?;
            w.flush().map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn sweep(args: &CommonArgs) -> Result<(), CliError> {
    let case = load_case(args.case.as_deref())?;
    // The sweep is taken by the autotuned loop before its second decision.
    let config = ExperimentConfig {
        strategy: Strategy::OedOpfAutotuned,
        horizon: 2,
        target_variance_trace: f64::MIN_POSITIVE,
        termination_eps: f64::MIN_POSITIVE,
        ..load_config(args)?
    };
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for result in run_batch(&case, &config, &seeds(args, &config)?) {
        let summary = result?;
        let samples = summary.sweep.ok_or_else(|| {
            CliError::Usage(summary.error.unwrap_or_else(|| "run ended before the trade-off sweep".into()))
        })?;
        let path = args.out.join(format!("sweep_seed{}.csv", summary.seed));
        let mut w = create(&path)?;
        write_sweep_csv(&samples, &mut w)?;
        w.flush().map_err(io_err(&path))?;
        println!("seed {}: {} samples, {} on the front -> {}", summary.seed, samples.len(), pareto_filter(&samples).len(), path.display());
    }
    Ok(())
}

fn fit(args: &FitArgs) -> Result<(), CliError> {
    let file = File::open(&args.sweep).map_err(io_err(&args.sweep))?;
    let samples: Vec<_> = read_sweep_csv(file)?.into_iter().map(|(s, _)| s).collect();
    let fit = fit_inverse_tradeoff(&pareto_filter(&samples))?;
    match args.format {
        Format::Csv => println!("a,lambda,residual\n{},{},{}", fit.a, fit.lambda, fit.residual),
        Format::Json => println!("{}", serde_json::to_string_pretty(&fit).expect("fit serializes")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => match args.strategy {
            Some(s) => run_strategies(&args.common, &[s], true),
            None => run_strategies(&args.common, &[Strategy::OedOpfAutotuned], false),
        },
        Command::Compare(args) => run_strategies(args, &Strategy::ALL, true),
        Command::Sweep(args) => sweep(args),
        Command::Fit(args) => fit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
