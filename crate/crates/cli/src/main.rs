use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mcfrcl_cli::experiment::parse_lambda_list;
use mcfrcl_cli::{compare_baseline, load_config, parse_config, run, sweep, CliError, ExperimentConfig};

/// Continual learning with Monte Carlo functional regularisation.
///
/// Exit codes: 0 success, 1 some seeds failed, 2 bad config, 3 I/O error,
/// 4 training error. Failures print a JSON record on stderr.
#[derive(Debug, Parser)]
#[command(name = "mcfrcl", version)]
struct Args {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Regularisation strength override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated λ values, or `grid` for the 10^n / 3·10^n grid.
    #[arg(long, value_name = "LIST", conflicts_with = "baseline")]
    sweep_lambda: Option<String>,
    /// Also run λ = 0 on the same seeds and write a comparison table.
    #[arg(long)]
    baseline: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

fn resolve(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => parse_config("{}", std::path::Path::new("."))?,
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        config.train.lambda = lambda;
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn execute(args: &Args) -> Result<bool, CliError> {
    let config = resolve(args)?;
    if args.print_config {
        let _ = writeln!(std::io::stdout(), "{}", config.echo());
        return Ok(true);
    }
    let out = config
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Config("no output directory; pass --out".into()))?;
    if let Some(list) = &args.sweep_lambda {
        let result = sweep(&config, &parse_lambda_list(list)?, &out)?;
        for (i, (lambda, s)) in result.entries.iter().enumerate() {
            let avg = s.aggregate.as_ref().map(|a| a.avg_accuracy_mean * 100.0);
            let mark = if result.best == Some(i) { "  <- best" } else { "" };
            println!("lambda {lambda}: avg accuracy {}{mark}", fmt(avg));
        }
        return Ok(result.entries.iter().all(|(_, s)| s.is_complete()));
    }
    if args.baseline {
        let cmp = compare_baseline(&config, &out)?;
        println!(
            "avg accuracy delta {} pts, BT delta {} pts (see {})",
            fmt(cmp.avg_accuracy_delta().map(|d| d * 100.0)),
            fmt(cmp.bt_delta().map(|d| d * 100.0)),
            out.join("comparison.csv").display()
        );
        return Ok(cmp.regularised.is_complete() && cmp.baseline.is_complete());
    }
    let summary = run(&config, &out)?;
    if let Some(a) = &summary.aggregate {
        println!(
            "avg accuracy {} (std {}), BT {} over {} run(s)",
            fmt(Some(a.avg_accuracy_mean * 100.0)),
            fmt(a.avg_accuracy_std.map(|s| s * 100.0)),
            fmt(a.bt_mean.map(|b| b * 100.0)),
            a.runs
        );
    }
    Ok(summary.is_complete())
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new()
        .filter_level(if args.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("RUST_LOG")
        .init();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!(r#"{{"error":"incomplete","message":"one or more seeds failed; see error.json files"}}"#);
            ExitCode::from(1)
        }
        Err(err) => {
            let record = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{record}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
