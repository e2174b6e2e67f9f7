use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mcfrcl::data::{load_idx_dir, make_split_tasks, make_synthetic_split, TaskBundle};
use mcfrcl::metrics::{aggregate, config_hash, emit, Aggregate, RunReport};
use mcfrcl::run_sequence;
use serde::Serialize;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::CliError;

pub fn load_tasks(config: &ExperimentConfig) -> Result<Vec<TaskBundle>, CliError> {
    let mut tasks = match config.dataset {
        DatasetKind::Synthetic => make_synthetic_split(&config.synthetic)?.tasks,
        DatasetKind::Mnist | DatasetKind::Fmnist => {
            let dir = config
                .data_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("no data directory".into()))?;
            let data = load_idx_dir(dir)?;
            make_split_tasks(&data.train, &data.test, &config.class_groups)?
        }
    };
    if let Some(limit) = config.train_limit {
        for t in &mut tasks {
            t.limit_train(limit, config.subset_seed);
        }
    }
    Ok(tasks)
}

fn write(path: PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub index: usize,
    pub seed: u64,
    pub result: Result<RunReport, String>,
}

/// Per-seed results of one configuration plus their aggregate.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub config_hash: String,
    pub outcomes: Vec<SeedOutcome>,
    /// `None` when no seed completed.
    pub aggregate: Option<Aggregate>,
}

impl RunSummary {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.outcomes
            .iter()
            .filter(|o| o.result.is_err())
            .map(|o| o.seed)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failed_seeds().is_empty()
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    seed: u64,
    error: &'a str,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{}", v * 100.0)).unwrap_or_default()
}

fn aggregate_csv(summary: &RunSummary) -> String {
    let runs = summary.outcomes.len();
    let failed: Vec<String> = summary.failed_seeds().iter().map(u64::to_string).collect();
    let agg = summary.aggregate.as_ref();
    format!(
        "runs,completed,avg_accuracy_mean,avg_accuracy_std,bt_mean,bt_std,config_hash,incomplete_seeds\n{},{},{},{},{},{},{},{}\n",
        runs,
        runs - failed.len(),
        fmt_opt(agg.map(|a| a.avg_accuracy_mean)),
        fmt_opt(agg.and_then(|a| a.avg_accuracy_std)),
        fmt_opt(agg.and_then(|a| a.bt_mean)),
        fmt_opt(agg.and_then(|a| a.bt_std)),
        summary.config_hash,
        failed.join(" ")
    )
}

/// Trains every seed, writing `seed-i/` per run plus `config.json` and
/// `aggregate.csv` into `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    create_dir(out)?;
    let echo = config.echo();
    write(out.join("config.json"), &echo)?;
    let tasks = load_tasks(config)?;
    let mut outcomes = Vec::with_capacity(config.runs);
    for i in 0..config.runs {
        let run_config = config.for_run(i);
        let dir = out.join(format!("seed-{i}"));
        create_dir(&dir)?;
        let run_echo = run_config.echo();
        write(dir.join("config.json"), &run_echo)?;
        log::info!("run {i}: seed {}", run_config.train.seed);
        let result = run_sequence(&tasks, &run_config.train).map(|mut report| {
            report.config_echo = run_echo;
            report
        });
        let result = match result {
            Ok(report) => {
                emit(&report, &dir, config.plot)?;
                Ok(report)
            }
            Err(err) => {
                let message = err.to_string();
                log::error!("seed {} failed: {message}", run_config.train.seed);
                let record = ErrorRecord {
                    seed: run_config.train.seed,
                    error: &message,
                };
                write(
                    dir.join("error.json"),
                    &serde_json::to_string(&record).expect("serializable"),
                )?;
                Err(message)
            }
        };
        outcomes.push(SeedOutcome {
            index: i,
            seed: run_config.train.seed,
            result,
        });
    }
    let done: Vec<RunReport> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().cloned())
        .collect();
    let summary = RunSummary {
        config_hash: config_hash(&echo),
        aggregate: if done.is_empty() { None } else { Some(aggregate(&done)?) },
        outcomes,
    };
    write(out.join("aggregate.csv"), &aggregate_csv(&summary))?;
    Ok(summary)
}

/// `10^n` and `3·10^n` for `n` in `-9..=7`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-9..=7)
        .flat_map(|n| {
            let base: f64 = format!("1e{n}").parse().expect("valid literal");
            [base, 3.0 * base]
        })
        .collect()
}

/// Parses `--sweep-lambda`: a comma list of non-negative numbers, or `grid`.
pub fn parse_lambda_list(text: &str) -> Result<Vec<f64>, CliError> {
    if text.trim() == "grid" {
        return Ok(default_lambda_grid());
    }
    let values = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| CliError::Config(format!("invalid lambda `{s}` in sweep list")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::Config("empty sweep list".into()));
    }
    Ok(values)
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub entries: Vec<(f64, RunSummary)>,
    /// Index into `entries` with the highest mean average accuracy.
    pub best: Option<usize>,
}

/// One full run per λ under `out/lambda-<λ>/`, plus `sweep.csv` with the best
/// entry by mean average accuracy flagged.
pub fn sweep(config: &ExperimentConfig, lambdas: &[f64], out: &Path) -> Result<SweepResult, CliError> {
    create_dir(out)?;
    let mut entries = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut c = config.clone();
        c.train.lambda = lambda;
        let summary = run(&c, &out.join(format!("lambda-{lambda}")))?;
        entries.push((lambda, summary));
    }
    let best = entries
        .iter()
        .enumerate()
        .filter_map(|(i, (_, s))| s.aggregate.as_ref().map(|a| (i, a.avg_accuracy_mean)))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i);
    let mut csv = String::from("lambda,avg_accuracy_mean,avg_accuracy_std,bt_mean,bt_std,config_hash,best\n");
    for (i, (lambda, s)) in entries.iter().enumerate() {
        let agg = s.aggregate.as_ref();
        let _ = writeln!(
            csv,
            "{lambda},{},{},{},{},{},{}",
            fmt_opt(agg.map(|a| a.avg_accuracy_mean)),
            fmt_opt(agg.and_then(|a| a.avg_accuracy_std)),
            fmt_opt(agg.and_then(|a| a.bt_mean)),
            fmt_opt(agg.and_then(|a| a.bt_std)),
            s.config_hash,
            u8::from(best == Some(i))
        );
    }
    write(out.join("sweep.csv"), &csv)?;
    Ok(SweepResult { entries, best })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub regularised: RunSummary,
    pub baseline: RunSummary,
}

impl Comparison {
    pub fn avg_accuracy_delta(&self) -> Option<f64> {
        Some(
            self.regularised.aggregate.as_ref()?.avg_accuracy_mean
                - self.baseline.aggregate.as_ref()?.avg_accuracy_mean,
        )
    }

    pub fn bt_delta(&self) -> Option<f64> {
        Some(self.regularised.aggregate.as_ref()?.bt_mean? - self.baseline.aggregate.as_ref()?.bt_mean?)
    }
}

/// Runs the configured λ and λ = 0 on the same seeds; writes both arms and
/// `comparison.csv`.
pub fn compare_baseline(config: &ExperimentConfig, out: &Path) -> Result<Comparison, CliError> {
    create_dir(out)?;
    let regularised = run(config, &out.join("regularised"))?;
    let mut base_config = config.clone();
    base_config.train.lambda = 0.0;
    let baseline = run(&base_config, &out.join("baseline"))?;
    let cmp = Comparison { regularised, baseline };
    let row = |name: &str, s: &RunSummary| {
        let agg = s.aggregate.as_ref();
        format!(
            "{name},{},{},{},{}\n",
            s.config_hash,
            fmt_opt(agg.map(|a| a.avg_accuracy_mean)),
            fmt_opt(agg.and_then(|a| a.bt_mean)),
            u8::from(s.is_complete())
        )
    };
    let mut csv = String::from("arm,config_hash,avg_accuracy_mean,bt_mean,complete\n");
    csv.push_str(&row("regularised", &cmp.regularised));
    csv.push_str(&row("baseline", &cmp.baseline));
    let _ = writeln!(
        csv,
        "delta,,{},{},",
        fmt_opt(cmp.avg_accuracy_delta()),
        fmt_opt(cmp.bt_delta())
    );
    write(out.join("comparison.csv"), &csv)?;
    Ok(cmp)
}
