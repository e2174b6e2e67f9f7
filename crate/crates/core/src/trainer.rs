//! Sequential task training.
//!
//! Each optimizer step maximizes
//!
//! ```text
//! (1/S_β) Σ_i log p(y_β | f(X_β; Θ_i))  −  λ Σ_τ (N_β / N_Cτ) Σ_k Σ_ξ D[q_t || q_{t−1}]
//! ```
//!
//! where the log-likelihood is summed over the batch. On the first task the
//! reference distribution is the functional prior at uniform-random inputs;
//! afterwards it is the frozen snapshot of the previous task's posterior at
//! points drawn from the stored coresets.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::bnn::{forward, Architecture, HeadMode, ModelSnapshot, ModelView, VariationalParams};
use crate::data::{sample_uniform_context, Samples, TaskBundle};
use crate::distributions::Divergence;
use crate::error::{Error, Result};
use crate::metrics::RunReport;
use crate::regularizer::{total_regulariser, ContextSet, Reference, RegulariserSettings};
use crate::rng::{derive_seed, purpose, seeded};
use crate::tensor::{DiffArray, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub divergence: Divergence,
    pub lambda: f64,
    pub epochs: usize,
    /// N_β
    pub batch_size: usize,
    /// N_Cτ
    pub context_points: usize,
    /// S_β
    pub likelihood_samples: usize,
    /// S_C
    pub context_samples: usize,
    /// MC samples at evaluation; defaults to `likelihood_samples`.
    pub eval_samples: Option<usize>,
    pub coreset_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub head_mode: HeadMode,
    /// Variance of the zero-mean Gaussian functional prior used on the first task.
    pub prior_variance: f64,
    pub hidden: Vec<usize>,
    pub init_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::Gw,
            lambda: 1.0,
            epochs: 10,
            batch_size: 128,
            context_points: 40,
            likelihood_samples: 30,
            context_samples: 30,
            eval_samples: None,
            coreset_size: 200,
            adam: AdamConfig::default(),
            seed: 0,
            head_mode: HeadMode::Single,
            prior_variance: 0.001,
            hidden: vec![256, 256],
            init_sigma: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("context_points", self.context_points),
            ("likelihood_samples", self.likelihood_samples),
            ("coreset_size", self.coreset_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be >= 1")));
        }
        if self.context_samples < 2 {
            return Err(Error::Config("`context_samples` must be >= 2".into()));
        }
        if self.eval_samples == Some(0) {
            return Err(Error::Config("`eval_samples` must be >= 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "`lambda` must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.prior_variance.is_nan() || self.prior_variance <= 0.0 {
            return Err(Error::Config("`prior_variance` must be > 0".into()));
        }
        if self.init_sigma.is_nan() || self.init_sigma <= 0.0 {
            return Err(Error::Config("`init_sigma` must be > 0".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("`hidden` needs at least one non-empty layer".into()));
        }
        self.adam.validate()
    }

    pub fn eval_samples(&self) -> usize {
        self.eval_samples.unwrap_or(self.likelihood_samples)
    }
}

/// Network shape implied by a task sequence: a shared head over every global
/// class, or one head per task.
pub fn architecture_for(tasks: &[TaskBundle], hidden: &[usize], mode: HeadMode) -> Result<Architecture> {
    let first = tasks.first().ok_or_else(|| Error::Invalid("no tasks".into()))?;
    let heads = match mode {
        HeadMode::Single => vec![tasks.iter().flat_map(|t| t.classes.iter()).max().map_or(0, |c| c + 1)],
        HeadMode::Multi => tasks.iter().map(|t| t.output_dims()).collect(),
    };
    Architecture::new(first.input_dim(), hidden.to_vec(), heads)
}

/// Retained inputs of one completed task.
#[derive(Clone, Debug, PartialEq)]
pub struct Coreset {
    pub task: usize,
    pub head: usize,
    /// `(len, dim)` row-major inputs, copied verbatim from the training set.
    pub inputs: Vec<f64>,
    pub dim: usize,
    /// Rows of the task's training set the entries were taken from.
    pub source_rows: Vec<usize>,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.source_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_rows.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoresetStore {
    pub entries: Vec<Coreset>,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    /// Mean over steps of the MC log-likelihood term.
    pub data_term: f64,
    /// Mean over steps of the (λ-scaled) regulariser.
    pub reg_term: f64,
    pub wall_ms: f64,
}

/// The two parts of the objective and their difference.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub likelihood: DiffArray,
    pub regulariser: DiffArray,
    /// `likelihood − regulariser`, to be maximized.
    pub objective: DiffArray,
}

/// Mean over `samples` weight draws of the batch-summed categorical log-likelihood.
pub fn likelihood_term(
    model: &ModelView,
    inputs: &DiffArray,
    targets: &[usize],
    head: usize,
    samples: usize,
    seed: u64,
) -> Result<DiffArray> {
    if targets.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if samples == 0 {
        return Err(Error::Invalid("likelihood needs at least one sample".into()));
    }
    let mut total: Option<DiffArray> = None;
    for i in 0..samples {
        let weights = model.sample_weights(head, derive_seed(seed, &[i as u64]))?;
        let ll = forward(&weights, inputs)?.categorical_log_likelihood(targets)?;
        total = Some(match total {
            None => ll,
            Some(t) => t.add(&ll)?,
        });
    }
    Ok(total.expect("samples >= 1").mul_scalar(1.0 / samples as f64))
}

/// Live posterior, its last snapshot, coresets and optimizer buffers.
pub struct Trainer {
    config: TrainConfig,
    params: VariationalParams,
    snapshot: Option<ModelSnapshot>,
    coresets: CoresetStore,
    adam: AdamState,
    tasks_done: usize,
}

impl Trainer {
    pub fn new(arch: Architecture, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = VariationalParams::init(&arch, config.init_sigma, config.seed)?;
        let adam = AdamState::new(params.blocks());
        Ok(Self {
            config,
            params,
            snapshot: None,
            coresets: CoresetStore::default(),
            adam,
            tasks_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn set_params(&mut self, params: VariationalParams) -> Result<()> {
        if params.architecture() != self.params.architecture() {
            return Err(Error::Invalid(
                "parameters do not match the trainer's architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn snapshot(&self) -> Option<&ModelSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn coresets(&self) -> &CoresetStore {
        &self.coresets
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn head_for(&self, task: usize) -> usize {
        match self.config.head_mode {
            HeadMode::Single => 0,
            HeadMode::Multi => task,
        }
    }

    /// Labels in the coordinates of the task's head.
    pub fn targets(&self, task: &TaskBundle, local: &[usize]) -> Vec<usize> {
        match self.config.head_mode {
            HeadMode::Single => task.global_labels(local),
            HeadMode::Multi => local.to_vec(),
        }
    }

    /// Context sets for one step: uniform inputs on the first task, otherwise
    /// a fresh random subset of every stored coreset.
    pub fn step_contexts(&self, task: usize, seed: u64) -> Result<Vec<ContextSet>> {
        let n = self.config.context_points;
        if self.coresets.entries.is_empty() {
            let dim = self.params.architecture().input_dim;
            let inputs = sample_uniform_context(dim, n, derive_seed(seed, &[purpose::CONTEXT]))?;
            return Ok(vec![ContextSet {
                task,
                head: self.head_for(task),
                inputs,
            }]);
        }
        self.coresets
            .entries
            .iter()
            .map(|c| {
                let mut rng = seeded(derive_seed(seed, &[purpose::CONTEXT, c.task as u64]));
                let take = n.min(c.len());
                let rows = index::sample(&mut rng, c.len(), take).into_vec();
                let values = rows
                    .iter()
                    .flat_map(|&r| c.inputs[r * c.dim..(r + 1) * c.dim].iter().copied())
                    .collect();
                Ok(ContextSet {
                    task: c.task,
                    head: c.head,
                    inputs: DiffArray::constant(&[take, c.dim], values)?,
                })
            })
            .collect()
    }

    /// Both objective terms for one batch, evaluated on `model`.
    pub fn objective_terms(
        &self,
        model: &ModelView,
        inputs: &DiffArray,
        targets: &[usize],
        task: usize,
        step_seed: u64,
    ) -> Result<ObjectiveTerms> {
        let head = self.head_for(task);
        let likelihood = likelihood_term(
            model,
            inputs,
            targets,
            head,
            self.config.likelihood_samples,
            derive_seed(step_seed, &[purpose::LIKELIHOOD]),
        )?;
        let contexts = self.step_contexts(task, step_seed)?;
        let reference = match &self.snapshot {
            Some(s) if !self.coresets.entries.is_empty() => Reference::Snapshot(s.view()),
            _ => Reference::Prior {
                variance: self.config.prior_variance,
            },
        };
        let settings = RegulariserSettings {
            divergence: self.config.divergence,
            samples: self.config.context_samples,
            lambda: self.config.lambda,
            batch_size: targets.len(),
        };
        let regulariser = total_regulariser(
            model,
            reference,
            &contexts,
            settings,
            derive_seed(step_seed, &[purpose::REGULARISER]),
        )?;
        let objective = likelihood.sub(&regulariser)?;
        Ok(ObjectiveTerms {
            likelihood,
            regulariser,
            objective,
        })
    }

    /// Negated objective and its gradient for every parameter block.
    pub fn loss_and_gradients(
        &self,
        inputs: &DiffArray,
        targets: &[usize],
        task: usize,
        step_seed: u64,
    ) -> Result<(ObjectiveTerms, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let (view, leaves) = self.params.track(&tape)?;
        let terms = self.objective_terms(&view, inputs, targets, task, step_seed)?;
        let grads = terms.objective.neg().backward()?;
        Ok((terms, leaves.iter().map(|l| grads.wrt(l)).collect()))
    }

    /// Negated objective at arbitrary parameters with the current trainer state.
    pub fn loss_at(
        &self,
        params: &VariationalParams,
        inputs: &DiffArray,
        targets: &[usize],
        task: usize,
        step_seed: u64,
    ) -> Result<f64> {
        let view = params.constant_view();
        Ok(-self
            .objective_terms(&view, inputs, targets, task, step_seed)?
            .objective
            .item())
    }

    /// Trains on the next task, then stores its coreset and snapshots the posterior.
    pub fn train_task(&mut self, task: &TaskBundle) -> Result<Vec<EpochLog>> {
        if task.index != self.tasks_done {
            return Err(Error::TaskOutOfOrder {
                expected: self.tasks_done,
                got: task.index,
            });
        }
        let arch = self.params.architecture().clone();
        if task.input_dim() != arch.input_dim {
            return Err(Error::Data(format!(
                "task {} has input dimension {}, model expects {}",
                task.index,
                task.input_dim(),
                arch.input_dim
            )));
        }
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training data", task.index)));
        }
        let head = self.head_for(task.index);
        let width = arch.heads.get(head).copied().ok_or(Error::UnknownHead {
            head,
            available: arch.heads.len(),
        })?;
        let all_targets = self.targets(task, &task.train.labels);
        if let Some(bad) = all_targets.iter().find(|&&y| y >= width) {
            return Err(Error::Data(format!("label {bad} does not fit head of width {width}")));
        }

        self.adam = AdamState::new(self.params.blocks());
        let seed = self.config.seed;
        let t = task.index as u64;
        let mut logs = Vec::with_capacity(self.config.epochs);
        let mut step = 0u64;
        for epoch in 0..self.config.epochs {
            let watch = Stopwatch::start();
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            order.shuffle(&mut seeded(derive_seed(seed, &[t, purpose::SHUFFLE, epoch as u64])));
            let (mut data_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
            for rows in order.chunks(self.config.batch_size) {
                let batch = task.train.select(rows);
                let targets: Vec<usize> = rows.iter().map(|&r| all_targets[r]).collect();
                let step_seed = derive_seed(seed, &[t, purpose::STEP, step]);
                let (terms, grads) = self.loss_and_gradients(&batch.input_array(), &targets, task.index, step_seed)?;
                adam_step(self.params.blocks_mut(), &grads, &mut self.adam, &self.config.adam)?;
                data_sum += terms.likelihood.item();
                reg_sum += terms.regulariser.item();
                steps += 1;
                step += 1;
            }
            let log = EpochLog {
                task: task.index,
                epoch,
                data_term: data_sum / steps as f64,
                reg_term: reg_sum / steps as f64,
                wall_ms: watch.elapsed_ms(),
            };
            log::info!(
                "task={} epoch={} data_term={:.6} reg_term={:.6} wall_ms={:.1}",
                log.task,
                log.epoch,
                log.data_term,
                log.reg_term,
                log.wall_ms
            );
            logs.push(log);
        }

        let coreset = select_coreset(
            &task.train,
            self.config.coreset_size,
            derive_seed(seed, &[t, purpose::CORESET]),
        );
        self.coresets.entries.push(Coreset {
            task: task.index,
            head,
            ..coreset
        });
        self.snapshot = Some(ModelSnapshot::new(&self.params));
        self.tasks_done += 1;
        Ok(logs)
    }

    /// Fraction of the task's test set whose MC-averaged predictive argmax
    /// (ties to the lowest index) equals the label.
    pub fn evaluate(&self, task: &TaskBundle, samples: usize, seed: u64) -> Result<f64> {
        if task.test.is_empty() {
            return Err(Error::Data(format!("task {} has an empty test set", task.index)));
        }
        let head = self.head_for(task.index);
        let view = self.params.constant_view();
        let width = view.head_width(head)?;
        let probs = view.predict_mc(&task.test.input_array(), head, samples, seed)?;
        let targets = self.targets(task, &task.test.labels);
        Ok(accuracy_from_probs(&probs, width, &targets))
    }
}

/// Share of rows whose argmax (first maximum) equals the target.
pub fn accuracy_from_probs(probs: &[f64], width: usize, targets: &[usize]) -> f64 {
    let correct = probs
        .chunks(width)
        .zip(targets)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / targets.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Uniform sample without replacement; rows are kept in ascending order.
fn select_coreset(train: &Samples, size: usize, seed: u64) -> Coreset {
    let mut rows = index::sample(&mut seeded(seed), train.len(), size.min(train.len())).into_vec();
    rows.sort_unstable();
    Coreset {
        task: 0,
        head: 0,
        inputs: train.select(&rows).inputs,
        dim: train.dim,
        source_rows: rows,
    }
}

/// Trains on every task in order, evaluating all tasks seen so far after each one.
pub fn run_sequence(tasks: &[TaskBundle], config: &TrainConfig) -> Result<RunReport> {
    run_sequence_with(tasks, config, |_, _| {})
}

/// As [`run_sequence`], calling `on_stage(stage, trainer)` after each task's evaluation.
pub fn run_sequence_with(
    tasks: &[TaskBundle],
    config: &TrainConfig,
    mut on_stage: impl FnMut(usize, &Trainer),
) -> Result<RunReport> {
    let arch = architecture_for(tasks, &config.hidden, config.head_mode)?;
    let mut trainer = Trainer::new(arch, config.clone())?;
    let mut accuracy = Vec::with_capacity(tasks.len());
    let mut epochs = Vec::new();
    for (stage, task) in tasks.iter().enumerate() {
        epochs.extend(trainer.train_task(task)?);
        let row = tasks[..=stage]
            .iter()
            .map(|seen| {
                let seed = derive_seed(config.seed, &[purpose::EVAL, stage as u64, seen.index as u64]);
                trainer.evaluate(seen, config.eval_samples(), seed)
            })
            .collect::<Result<Vec<_>>>()?;
        log::info!("stage={} accuracy={:?}", stage, row);
        accuracy.push(row);
        on_stage(stage, &trainer);
    }
    Ok(RunReport {
        accuracy,
        epochs,
        config_echo: serde_json::to_string(config).expect("config serializes"),
        seed: config.seed,
    })
}

struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_split, SyntheticSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            context_points: 8,
            likelihood_samples: 2,
            context_samples: 3,
            coreset_size: 10,
            hidden: vec![8],
            adam: AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tasks(n: usize, train: usize) -> Vec<TaskBundle> {
        make_synthetic_split(&SyntheticSpec {
            tasks: n,
            train_per_task: train,
            test_per_task: 20,
            ..Default::default()
        })
        .unwrap()
        .tasks
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            context_samples: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn one_epoch_of_256_examples_is_two_steps() {
        let ts = tasks(1, 256);
        let arch = architecture_for(&ts, &[8], HeadMode::Single).unwrap();
        let mut trainer = Trainer::new(arch, small_config()).unwrap();
        trainer.train_task(&ts[0]).unwrap();
        assert_eq!(trainer.adam.step, 2);
    }

    #[test]
    fn state_transition_after_a_task() {
        let ts = tasks(2, 64);
        let arch = architecture_for(&ts, &[8], HeadMode::Single).unwrap();
        assert_eq!(arch.heads, vec![4]);
        let mut trainer = Trainer::new(arch, small_config()).unwrap();
        assert!(matches!(
            trainer.train_task(&ts[1]),
            Err(Error::TaskOutOfOrder { expected: 0, got: 1 })
        ));
        trainer.train_task(&ts[0]).unwrap();
        let first = trainer.snapshot().unwrap().params().clone();
        trainer.train_task(&ts[1]).unwrap();
        assert_ne!(&first, trainer.snapshot().unwrap().params());
        assert_eq!(trainer.coresets().entries.len(), 2);
        for (c, t) in trainer.coresets().entries.iter().zip(&ts) {
            assert_eq!(c.len(), 10);
            for (i, &r) in c.source_rows.iter().enumerate() {
                assert_eq!(&c.inputs[i * c.dim..(i + 1) * c.dim], t.train.row(r));
            }
        }
    }

    #[test]
    fn multi_head_architecture() {
        let ts = tasks(3, 16);
        let arch = architecture_for(&ts, &[8], HeadMode::Multi).unwrap();
        assert_eq!(arch.heads, vec![2, 2, 2]);
    }

    #[test]
    fn accuracy_argmax_ties_go_low() {
        assert_eq!(accuracy_from_probs(&[0.5, 0.5, 0.2, 0.8], 2, &[0, 1]), 1.0);
        assert_eq!(accuracy_from_probs(&[0.5, 0.5, 0.2, 0.8], 2, &[1, 1]), 0.5);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let mut ts = tasks(1, 16);
        ts[0].test = ts[0].test.select(&[]);
        let arch = architecture_for(&ts, &[8], HeadMode::Single).unwrap();
        let trainer = Trainer::new(arch, small_config()).unwrap();
        assert!(trainer.evaluate(&ts[0], 2, 0).is_err());
    }
}
