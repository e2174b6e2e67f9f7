//! Accuracy matrices, average accuracy, backward transfer and file output.
//!
//! Accuracies are fractions in memory and percentages in emitted files.
//! Backward transfer follows the usual definition
//! `BT = 1/(T−1) Σ_{τ<T} (A[T][τ] − A[τ][τ])`; negative values mean forgetting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::EpochLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `accuracy[t][τ]`: accuracy on task τ after training task t (τ ≤ t).
    pub accuracy: Vec<Vec<f64>>,
    pub epochs: Vec<EpochLog>,
    /// Resolved configuration, as JSON.
    pub config_echo: String,
    pub seed: u64,
}

impl RunReport {
    pub fn num_tasks(&self) -> usize {
        self.accuracy.len()
    }

    fn check_complete(&self) -> Result<()> {
        if self.accuracy.is_empty() {
            return Err(Error::Invalid("accuracy matrix is empty".into()));
        }
        for (t, row) in self.accuracy.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Invalid(format!(
                    "accuracy row {t} has {} entries, expected {}",
                    row.len(),
                    t + 1
                )));
            }
            if let Some(a) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::Invalid(format!("accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config echo.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config_echo)
    }

    pub fn total_time_s(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_ms).sum::<f64>() / 1e3
    }

    /// `A[T][τ] / A[τ][τ]`.
    pub fn retention(&self, task: usize) -> Result<f64> {
        self.check_complete()?;
        let last = self.accuracy.last().expect("non-empty");
        let own = self
            .accuracy
            .get(task)
            .map(|row| row[task])
            .ok_or_else(|| Error::Invalid(format!("no accuracy for task {task}")))?;
        Ok(last[task] / own)
    }
}

pub fn config_hash(config_json: &str) -> String {
    let digest = Sha256::digest(config_json.as_bytes());
    hex::encode(&digest[..8])
}

/// Mean of the final row.
pub fn average_accuracy(report: &RunReport) -> Result<f64> {
    report.check_complete()?;
    let last = report.accuracy.last().expect("non-empty");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

pub fn backward_transfer(report: &RunReport) -> Result<f64> {
    report.check_complete()?;
    let t = report.num_tasks();
    if t < 2 {
        return Err(Error::Invalid("backward transfer needs at least two tasks".into()));
    }
    let last = &report.accuracy[t - 1];
    let sum: f64 = (0..t - 1).map(|tau| last[tau] - report.accuracy[tau][tau]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Mean and sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: Option<f64>,
    pub bt_mean: Option<f64>,
    pub bt_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Invalid("nothing to aggregate".into()));
    }
    let avgs = reports.iter().map(average_accuracy).collect::<Result<Vec<_>>>()?;
    let (avg_accuracy_mean, avg_accuracy_std) = mean_std(&avgs);
    let (bt_mean, bt_std) = if reports.iter().all(|r| r.num_tasks() >= 2) {
        let bts = reports.iter().map(backward_transfer).collect::<Result<Vec<_>>>()?;
        let (m, s) = mean_std(&bts);
        (Some(m), s)
    } else {
        (None, None)
    };
    Ok(Aggregate {
        runs: reports.len(),
        avg_accuracy_mean,
        avg_accuracy_std,
        bt_mean,
        bt_std,
    })
}

fn pct(x: f64) -> String {
    format!("{}", x * 100.0)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_default()
}

pub fn accuracy_matrix_csv(report: &RunReport) -> String {
    let mut s = String::from("stage,task,accuracy\n");
    for (t, row) in report.accuracy.iter().enumerate() {
        for (tau, a) in row.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", t + 1, tau + 1, pct(*a));
        }
    }
    s
}

pub fn summary_csv(report: &RunReport) -> Result<String> {
    let avg = average_accuracy(report)?;
    let bt = (report.num_tasks() >= 2)
        .then(|| backward_transfer(report))
        .transpose()?;
    Ok(format!(
        "avg_accuracy,bt,config_hash\n{},{},{}\n",
        pct(avg),
        opt_pct(bt),
        report.config_hash()
    ))
}

pub fn timing_csv(report: &RunReport) -> String {
    let mut s = String::from("task,epoch,data_term,reg_term,wall_ms\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3}",
            e.task + 1,
            e.epoch + 1,
            e.data_term,
            e.reg_term,
            e.wall_ms
        );
    }
    let _ = writeln!(s, "total,,,,{:.3}", report.total_time_s() * 1e3);
    s
}

pub fn aggregate_csv(agg: &Aggregate) -> String {
    format!(
        "runs,avg_accuracy_mean,avg_accuracy_std,bt_mean,bt_std\n{},{},{},{},{}\n",
        agg.runs,
        pct(agg.avg_accuracy_mean),
        opt_pct(agg.avg_accuracy_std),
        opt_pct(agg.bt_mean),
        opt_pct(agg.bt_std)
    )
}

/// Accuracy of each task across stages as a standalone SVG line chart.
pub fn accuracy_svg(report: &RunReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let stages = report.num_tasks().max(1);
    let x = |stage: usize| {
        if stages == 1 {
            W / 2.0
        } else {
            PAD + (W - 2.0 * PAD) * stage as f64 / (stages - 1) as f64
        }
    };
    let y = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" font-size=\"12\" text-anchor=\"middle\">stage</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">accuracy (%)</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        ly = H - 12.0,
        cy = H / 2.0,
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            PAD - 4.0,
            y(tick) + 3.0,
            tick * 100.0
        );
    }
    for stage in 0..report.num_tasks() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x(stage),
            H - PAD + 14.0,
            stage + 1
        );
    }
    for task in 0..report.num_tasks() {
        let color = COLORS[task % COLORS.len()];
        let points: Vec<String> = (task..report.num_tasks())
            .map(|stage| format!("{:.2},{:.2}", x(stage), y(report.accuracy[stage][task])))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted point");
            let _ = writeln!(s, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">task {}</text>",
            W - PAD + 4.0,
            PAD + 14.0 * task as f64,
            task + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Paths written by [`emit`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmittedFiles {
    pub accuracy_matrix: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
    pub plot: Option<PathBuf>,
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `accuracy_matrix.csv`, `summary.csv`, `timing.csv` and optionally
/// `accuracy.svg` into `dir`. Only `timing.csv` depends on wall-clock time.
pub fn emit(report: &RunReport, dir: &Path, plot: bool) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summary_csv(report)?;
    Ok(EmittedFiles {
        accuracy_matrix: write(dir.join("accuracy_matrix.csv"), &accuracy_matrix_csv(report))?,
        summary: write(dir.join("summary.csv"), &summary)?,
        timing: write(dir.join("timing.csv"), &timing_csv(report))?,
        plot: if plot {
            Some(write(dir.join("accuracy.svg"), &accuracy_svg(report))?)
        } else {
            None
        },
    })
}
