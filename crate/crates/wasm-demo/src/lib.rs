//! Browser bindings. Each exported function returns a JSON string; the plain
//! Rust functions underneath are what the tests exercise.

use mcfrcl::adam::AdamConfig;
use mcfrcl::data::{make_synthetic_split, SyntheticSpec};
use mcfrcl::distributions::{fit_moments, Divergence, Family, UnivariateFit};
use mcfrcl::metrics::{average_accuracy, backward_transfer};
use mcfrcl::trainer::{run_sequence_with, TrainConfig};
use mcfrcl::DiffArray;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Curves {
    pub xs: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub value: f64,
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Densities of `p` and `q` on a shared grid and `D[p || q]`.
pub fn divergence_curves(
    divergence: Divergence,
    p: (f64, f64),
    q: (f64, f64),
    points: usize,
) -> Result<Curves, String> {
    if !(p.1 > 0.0 && q.1 > 0.0) {
        return Err("scales must be positive".into());
    }
    let family = divergence.family();
    let value = divergence
        .evaluate(
            &UnivariateFit::new(family, p.0, p.1),
            &UnivariateFit::new(family, q.0, q.1),
        )
        .map_err(|e| e.to_string())?
        .item();
    let reach = 4.0 * p.1.max(q.1);
    let xs = grid(p.0.min(q.0) - reach, p.0.max(q.0) + reach, points.max(2));
    Ok(Curves {
        p: xs.iter().map(|&x| family.pdf(p.0, p.1, x)).collect(),
        q: xs.iter().map(|&x| family.pdf(q.0, q.1, x)).collect(),
        xs,
        value,
    })
}

#[derive(Debug, Serialize)]
pub struct FittedFamily {
    pub family: Family,
    pub location: f64,
    pub scale: f64,
    pub pdf: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Fits {
    pub xs: Vec<f64>,
    /// Histogram density at `xs`.
    pub density: Vec<f64>,
    pub fits: Vec<FittedFamily>,
}

/// Moment fits of all three families to `samples`, with a histogram for reference.
pub fn fit_all(samples: &[f64], bins: usize) -> Result<Fits, String> {
    let finite: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    let block = DiffArray::constant(&[finite.len(), 1], finite.clone()).map_err(|e| e.to_string())?;
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    // clip the view to the central 98% so heavy tails stay readable
    let at = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = if sorted.is_empty() {
        (0.0, 1.0)
    } else {
        (at(0.01), at(0.99))
    };
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in &finite {
        if (lo..=hi).contains(&x) {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let xs: Vec<f64> = (0..bins).map(|i| lo + width * (i as f64 + 0.5)).collect();
    let density = counts
        .iter()
        .map(|&c| c as f64 / (finite.len().max(1) as f64 * width))
        .collect();
    let fits = [Family::Gaussian, Family::Laplace, Family::Cauchy]
        .into_iter()
        .map(|family| {
            let fit = fit_moments(&block, family).map_err(|e| e.to_string())?;
            let (location, scale) = (fit.location.item(), fit.scale.item());
            Ok(FittedFamily {
                family,
                location,
                scale,
                pdf: xs.iter().map(|&x| family.pdf(location, scale, x)).collect(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Fits { xs, density, fits })
}

#[derive(Debug, Serialize)]
pub struct DemoRun {
    /// `accuracy[t][τ]` as fractions.
    pub accuracy: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    pub backward_transfer: f64,
    pub grid_size: usize,
    /// Predicted class per cell of the unit square after each stage, row-major
    /// from the top-left corner.
    pub decisions: Vec<Vec<u8>>,
    /// `[x, y, class]` of a subsample of the training points.
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug)]
pub struct DemoSettings {
    pub divergence: Divergence,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub grid_size: usize,
}

/// Three synthetic binary tasks on a small network, with decision maps per stage.
pub fn continual_demo(settings: DemoSettings) -> Result<DemoRun, String> {
    let tasks = make_synthetic_split(&SyntheticSpec {
        train_per_task: 300,
        test_per_task: 300,
        seed: settings.seed,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?
    .tasks;
    let config = TrainConfig {
        divergence: settings.divergence,
        lambda: settings.lambda,
        epochs: settings.epochs,
        batch_size: 32,
        likelihood_samples: 5,
        context_samples: 5,
        eval_samples: Some(10),
        hidden: vec![32, 32],
        seed: settings.seed,
        adam: AdamConfig {
            lr: 0.005,
            ..Default::default()
        },
        ..Default::default()
    };
    let n = settings.grid_size.clamp(4, 128);
    let cells: Vec<f64> = (0..n * n)
        .flat_map(|i| {
            let (row, col) = (i / n, i % n);
            [(col as f64 + 0.5) / n as f64, 1.0 - (row as f64 + 0.5) / n as f64]
        })
        .collect();
    let cells = DiffArray::constant(&[n * n, 2], cells).map_err(|e| e.to_string())?;
    let mut decisions = Vec::new();
    let mut failure = None;
    let report = run_sequence_with(&tasks, &config, |stage, trainer| {
        let view = trainer.params().constant_view();
        let width = view.architecture().heads[0];
        match view.predict_mc(&cells, 0, 10, stage as u64) {
            Ok(probs) => decisions.push(
                probs
                    .chunks(width)
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold(0, |best, (i, &p)| if p > row[best] { i } else { best }) as u8
                    })
                    .collect(),
            ),
            Err(e) => failure = Some(e.to_string()),
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = failure {
        return Err(e);
    }
    let points = tasks
        .iter()
        .flat_map(|t| {
            let global = t.global_labels(&t.train.labels);
            (0..t.train.len()).step_by(3).map(move |i| {
                let x = t.train.row(i);
                [x[0], x[1], global[i] as f64]
            })
        })
        .collect();
    Ok(DemoRun {
        average_accuracy: average_accuracy(&report).map_err(|e| e.to_string())?,
        backward_transfer: backward_transfer(&report).map_err(|e| e.to_string())?,
        accuracy: report.accuracy,
        grid_size: n,
        decisions,
        points,
    })
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsValue::from_str(&e))
}

fn parse_divergence(name: &str) -> Result<Divergence, String> {
    name.parse::<Divergence>().map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn divergence_explorer(
    divergence: &str,
    loc_p: f64,
    scale_p: f64,
    loc_q: f64,
    scale_q: f64,
) -> Result<String, JsValue> {
    to_json(parse_divergence(divergence).and_then(|d| divergence_curves(d, (loc_p, scale_p), (loc_q, scale_q), 241)))
}

#[wasm_bindgen]
pub fn fit_samples(samples: &[f64]) -> Result<String, JsValue> {
    to_json(fit_all(samples, 40))
}

#[wasm_bindgen]
pub fn run_continual(divergence: &str, lambda: f64, epochs: usize, seed: u32) -> Result<String, JsValue> {
    to_json(parse_divergence(divergence).and_then(|divergence| {
        continual_demo(DemoSettings {
            divergence,
            lambda,
            epochs,
            seed: seed as u64,
            grid_size: 48,
        })
    }))
}
