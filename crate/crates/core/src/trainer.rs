//! End-to-end training.
//!
//! One step runs the whole chain forward and backward:
//!
//! ```text
//!  θ ──simulate──▶ p⁽ʲ⁾ ──kron──▶ p ──mapping──▶ ω ──target net──▶ loss
//!  ▲                 │                │            │
//!  └──adjoint◀── ∂p⁽ʲ⁾ ◀──product rule── ∂p ◀──── ∂ω ◀──── backprop
//! ```
//!
//! Only θ and the mapping parameters are trainable; the target weights ω are
//! regenerated from them at every step and never stored.

use std::cell::Cell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DatasetName, MappingConfig, MappingKind, OptimizerConfig, TrainConfig};
use crate::data::{self, Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::mapping::{
    build_inputs, chain_probability_gradient, count_mapping_params, forward_all, mapping_backprop, Mapping, MappingInput, MlpMapping,
    MpsMapping, WeightVector,
};
use crate::optim::{AdamConfig, AdamState};
use crate::qnn::{adjoint_gradient, kron_backward, simulate_distributed, CircuitSpec, ProbVector, ThetaParams};
use crate::target::{assign_weights, param_count, Batch, Evaluation, TargetNetworkSpec};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Exact header of the metrics CSV.
pub const METRICS_HEADER: &str = "step,epoch,loss,train_acc,test_acc,wall_ms,trainable,m";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.qtc";

/// State captured when training is aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSnapshot {
    pub step: u64,
    pub reason: String,
    pub loss: f64,
    pub theta_max_abs: f64,
    pub mapping_max_abs: f64,
    pub omega_max_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub theta: usize,
    pub mapping: usize,
    pub total: usize,
    pub m: usize,
    pub ratio: f64,
}

impl ParamBreakdown {
    pub fn new(theta: usize, mapping: usize, m: usize) -> Self {
        let total = theta + mapping;
        Self {
            theta,
            mapping,
            total,
            m,
            ratio: total as f64 / m as f64,
        }
    }

    /// Single-line `key=value` form.
    pub fn summary_line(&self) -> String {
        format!(
            "theta={} mapping={} total={} m={} ratio={:.6}",
            self.theta, self.mapping, self.total, self.m, self.ratio
        )
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_ms: u64,
    pub trainable_param_count: usize,
    pub m: usize,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss,
            self.train_accuracy,
            self.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            self.wall_ms,
            self.trainable_param_count,
            self.m
        )
    }
}

/// Gradients of the mean batch loss with respect to every trainable entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub evaluation: Evaluation,
    pub theta: Vec<f64>,
    pub mapping: Vec<f64>,
    pub omega_max_abs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    circuit: CircuitSpec,
    theta: ThetaParams,
    mapping: Mapping,
    target: TargetNetworkSpec,
    optimizer: OptimizerConfig,
    adam_theta: AdamState,
    adam_mapping: AdamState,
    prob_scale: bool,
    step: u64,
    seed: u64,
    m: usize,
    generations: Cell<u64>,
}

impl TrainState {
    /// Assembles a state from explicit parameters with fresh optimizer moments.
    pub fn new(
        circuit: CircuitSpec,
        theta: ThetaParams,
        mapping: Mapping,
        target: TargetNetworkSpec,
        optimizer: OptimizerConfig,
        prob_scale: bool,
        seed: u64,
    ) -> Result<Self> {
        let m = param_count(&target)?;
        let n = circuit.total_qubits();
        if n >= usize::BITS as usize || (1usize << n) < m {
            return Err(config_err!(
                "insufficient qubits: {n} qubits give 2^{n} basis states but the target has m = {m} weights (need N ≥ ⌈log₂ m⌉)"
            ));
        }
        if theta.len() != circuit.theta_count() {
            return Err(config_err!(
                "{} angles supplied for a circuit with {}",
                theta.len(),
                circuit.theta_count()
            ));
        }
        if mapping.input_len() != n + 1 {
            return Err(config_err!(
                "mapping takes {} coordinates but {n} qubits need {}",
                mapping.input_len(),
                n + 1
            ));
        }
        Ok(Self {
            adam_theta: AdamState::new(theta.len()),
            adam_mapping: AdamState::new(mapping.params().len()),
            circuit,
            theta,
            mapping,
            target,
            optimizer,
            prob_scale,
            step: 0,
            seed,
            m,
            generations: Cell::new(0),
        })
    }

    /// Seeded initialisation: θ uniform in [−π, π], then the mapping.
    pub fn initialise(
        circuit: CircuitSpec,
        mapping: &MappingConfig,
        target: TargetNetworkSpec,
        optimizer: OptimizerConfig,
        prob_scale: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ThetaParams::random(&circuit, &mut rng);
        let sites = circuit.total_qubits() + 1;
        let mapping = match mapping.kind {
            MappingKind::Mps => Mapping::Mps(MpsMapping::init(sites, mapping.bond_dim(), &mut rng)?),
            MappingKind::Mlp => Mapping::Mlp(MlpMapping::init(sites, mapping.hidden(), &mut rng)?),
        };
        Self::new(circuit, theta, mapping, target, optimizer, prob_scale, seed)
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        Self::initialise(
            config.circuit_spec()?,
            &config.mapping,
            config.target_spec()?,
            config.optimizer,
            config.run.prob_scale,
            config.run.seed,
        )
    }

    pub fn circuit(&self) -> &CircuitSpec {
        &self.circuit
    }

    pub fn theta(&self) -> &ThetaParams {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ThetaParams {
        &mut self.theta
    }

    pub fn mapping(&self) -> &Mapping {
        &self.mapping
    }

    pub fn mapping_mut(&mut self) -> &mut Mapping {
        &mut self.mapping
    }

    pub fn target(&self) -> &TargetNetworkSpec {
        &self.target
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.optimizer
    }

    pub fn set_optimizer(&mut self, optimizer: OptimizerConfig) {
        self.optimizer = optimizer;
    }

    pub fn adam_theta(&self) -> &AdamState {
        &self.adam_theta
    }

    pub fn adam_mapping(&self) -> &AdamState {
        &self.adam_mapping
    }

    pub fn prob_scale(&self) -> bool {
        self.prob_scale
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// How many times ω has been generated from this state (or its clones).
    pub fn weight_generations(&self) -> u64 {
        self.generations.get()
    }

    /// Entries the optimizer iterates over.
    pub fn optimizer_visible_entries(&self) -> usize {
        self.adam_theta.len() + self.adam_mapping.len()
    }

    pub(crate) fn restore_optimizer(&mut self, adam_theta: AdamState, adam_mapping: AdamState, step: u64) -> Result<()> {
        if adam_theta.len() != self.theta.len() || adam_mapping.len() != self.mapping.params().len() {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter shapes".into()));
        }
        self.adam_theta = adam_theta;
        self.adam_mapping = adam_mapping;
        self.step = step;
        Ok(())
    }

    fn forward(&self) -> Result<Forward> {
        self.generations.set(self.generations.get() + 1);
        let (subs, combined) = simulate_distributed(&self.circuit, &self.theta)?;
        let inputs = build_inputs(&combined, self.m, self.prob_scale)?;
        let omega = WeightVector(forward_all(&self.mapping, &inputs)?);
        Ok(Forward { subs, combined, inputs, omega })
    }

    /// Composition: simulate every sub-circuit, combine, map to `m` weights.
    pub fn generate_full_weights(&self) -> Result<WeightVector> {
        Ok(self.forward()?.omega)
    }

    /// Loss and accuracy of the generated network on `batch`.
    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let omega = self.generate_full_weights()?;
        assign_weights(&self.target, &omega)?.forward_loss(batch)
    }

    pub fn gradients(&self, batch: &Batch) -> Result<Gradients> {
        let fwd = self.forward()?;
        let net = assign_weights(&self.target, &fwd.omega)?;
        let (evaluation, d_omega) = net.loss_and_gradient(batch)?;
        let omega_max_abs = max_abs(fwd.omega.as_slice());
        if !evaluation.loss.is_finite() || evaluation.loss.abs() > DIVERGENCE_LOSS {
            return Err(self.diverged(
                format!("loss {} outside the accepted range", evaluation.loss),
                evaluation.loss,
                omega_max_abs,
            ));
        }

        let mg = mapping_backprop(&self.mapping, &fwd.inputs, &d_omega)?;
        let d_prob = chain_probability_gradient(&mg.prob_coord, &fwd.combined, self.prob_scale);
        let d_subs = kron_backward(&fwd.subs, &d_prob)?;
        let mut theta = Vec::with_capacity(self.theta.len());
        for (j, (&nj, upstream)) in self.circuit.splits().iter().zip(&d_subs).enumerate() {
            theta.extend(adjoint_gradient(nj, self.circuit.layers(), self.theta.block(j), upstream)?);
        }
        Ok(Gradients {
            evaluation,
            theta,
            mapping: mg.params,
            omega_max_abs,
        })
    }

    /// One optimizer update of θ and the mapping on `batch`.
    pub fn train_step(&mut self, batch: &Batch, epoch: u64) -> Result<MetricsRecord> {
        if batch.is_empty() {
            return Err(Error::Data("training batch is empty".into()));
        }
        let grads = self.gradients(batch)?;
        self.adam_theta.step(
            self.theta.as_mut_slice(),
            &grads.theta,
            &AdamConfig::with_lr(self.optimizer.lr_theta),
        );
        self.adam_mapping.step(
            self.mapping.params_mut(),
            &grads.mapping,
            &AdamConfig::with_lr(self.optimizer.lr_mapping),
        );
        self.step += 1;
        if self.theta.as_slice().iter().chain(self.mapping.params()).any(|v| !v.is_finite()) {
            return Err(self.diverged(
                "a trainable parameter became non-finite".into(),
                grads.evaluation.loss,
                grads.omega_max_abs,
            ));
        }
        Ok(MetricsRecord {
            step: self.step,
            epoch,
            loss: grads.evaluation.loss,
            train_accuracy: grads.evaluation.accuracy,
            test_accuracy: None,
            wall_ms: 0,
            trainable_param_count: self.optimizer_visible_entries(),
            m: self.m,
        })
    }

    fn diverged(&self, reason: String, loss: f64, omega_max_abs: f64) -> Error {
        Error::Diverged(Box::new(DivergenceSnapshot {
            step: self.step,
            reason,
            loss,
            theta_max_abs: max_abs(self.theta.as_slice()),
            mapping_max_abs: max_abs(self.mapping.params()),
            omega_max_abs,
        }))
    }
}

struct Forward {
    subs: Vec<ProbVector>,
    combined: ProbVector,
    inputs: Vec<MappingInput>,
    omega: WeightVector,
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// θ count, mapping count and their ratio to the target size.
pub fn count_trainable_params(state: &TrainState) -> ParamBreakdown {
    ParamBreakdown::new(
        state.circuit.theta_count(),
        count_mapping_params(&state.mapping),
        state.m,
    )
}

/// Loads the train and test splits named by the config.
pub fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let ds = &config.dataset;
    if !ds.data_dir.is_dir() {
        return Err(Error::Data(format!(
            "dataset directory {} does not exist",
            ds.data_dir.display()
        )));
    }
    let load = |split| match ds.name {
        DatasetName::Mnist => data::load_mnist_dir(&ds.data_dir, split),
        DatasetName::Cifar10 => Ok(data::load_cifar10_binary(&data::cifar10_paths(&ds.data_dir, split))?.with_split(split)),
    };
    let (train, test) = (load(Split::Train)?, load(Split::Test)?);
    if ds.classes.is_none() && ds.per_class_cap.is_none() && ds.test_per_class_cap.is_none() {
        return Ok((train, test));
    }
    let classes: Vec<usize> = ds.classes.clone().unwrap_or_else(|| (0..10).collect());
    Ok((
        data::subset(&train, &classes, ds.per_class_cap.unwrap_or(usize::MAX))?,
        data::subset(&test, &classes, ds.test_per_class_cap.unwrap_or(usize::MAX))?,
    ))
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_test_accuracy: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub state: TrainState,
}

/// A training run over borrowed datasets, writing metrics as it goes.
pub struct Experiment<'d> {
    config: TrainConfig,
    train: &'d Dataset,
    test: &'d Dataset,
    state: TrainState,
    epoch: u64,
    records: Vec<MetricsRecord>,
    metrics: BufWriter<File>,
    started: Instant,
}

impl<'d> Experiment<'d> {
    /// Starts a run: initialises the state, writes the CSV header and the
    /// initial evaluation record (step 0, epoch 0).
    pub fn start(config: TrainConfig, train: &'d Dataset, test: &'d Dataset) -> Result<Self> {
        let state = TrainState::from_config(&config)?;
        Self::with_state(config, state, train, test)
    }

    /// Like [`Experiment::start`] but from an already initialised state;
    /// `config` supplies only the dataset-independent run settings.
    pub fn with_state(config: TrainConfig, state: TrainState, train: &'d Dataset, test: &'d Dataset) -> Result<Self> {
        check_data(&config, &state, train, test)?;
        let dir = &config.run.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut exp = Self {
            config,
            train,
            test,
            state,
            epoch: 0,
            records: Vec::new(),
            metrics: BufWriter::new(file),
            started: Instant::now(),
        };
        writeln!(exp.metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        let initial = exp.state.evaluate(&train.all())?;
        let test_accuracy = exp.test_accuracy_now()?;
        let record = MetricsRecord {
            step: 0,
            epoch: 0,
            loss: initial.loss,
            train_accuracy: initial.accuracy,
            test_accuracy,
            wall_ms: exp.wall_ms(),
            trainable_param_count: exp.state.optimizer_visible_entries(),
            m: exp.state.m(),
        };
        exp.push(record)?;
        exp.flush()?;
        Ok(exp)
    }

    /// Continues a run from a checkpoint, appending to its metrics file.
    ///
    /// `config` supplies run settings such as the epoch budget; the checkpoint
    /// supplies every trainable array and the optimizer moments.
    pub fn resume(config: TrainConfig, checkpoint: &Path, train: &'d Dataset, test: &'d Dataset) -> Result<Self> {
        let Checkpoint { mut state, epoch, .. } = load_checkpoint(checkpoint)?;
        state.set_optimizer(config.optimizer);
        check_data(&config, &state, train, test)?;
        let dir = &config.run.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            config,
            train,
            test,
            state,
            epoch,
            records: Vec::new(),
            metrics: BufWriter::new(file),
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn wall_ms(&self) -> u64 {
        if self.config.run.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn metrics_path(&self) -> PathBuf {
        self.config.run.output_dir.join(METRICS_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config.run.output_dir.join(CHECKPOINT_FILE)
    }

    fn push(&mut self, record: MetricsRecord) -> Result<()> {
        let path = self.metrics_path();
        writeln!(self.metrics, "{}", record.csv_row()).map_err(|e| Error::io(&path, e))?;
        self.records.push(record);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.metrics_path();
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }

    fn test_accuracy_now(&self) -> Result<Option<f64>> {
        if self.test.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.state.evaluate(&self.test.all())?.accuracy))
    }

    /// Runs one epoch of shuffled mini-batches; returns the test accuracy
    /// when this epoch is on the evaluation cadence.
    pub fn run_epoch(&mut self) -> Result<Option<f64>> {
        self.epoch += 1;
        let epoch = self.epoch;
        let order = data::batches(self.train.len(), self.config.run.batch_size, self.config.run.seed, epoch)?;
        let count = order.len();
        let mut test_accuracy = None;
        for (b, indices) in order.iter().enumerate() {
            let batch = self.train.batch(indices);
            let outcome = self.state.train_step(&batch, epoch);
            let mut record = match outcome {
                Ok(r) => r,
                Err(e) => {
                    let _ = self.flush();
                    if let Error::Diverged(snapshot) = &e {
                        self.write_divergence(snapshot);
                    }
                    return Err(e);
                }
            };
            if b + 1 == count && self.config.run.eval_every > 0 && epoch % self.config.run.eval_every == 0 {
                test_accuracy = self.test_accuracy_now()?;
                record.test_accuracy = test_accuracy;
            }
            record.wall_ms = self.wall_ms();
            self.push(record)?;
        }
        self.flush()?;
        let every = self.config.run.checkpoint_every;
        if every > 0 && epoch % every == 0 {
            self.save_checkpoint()?;
        }
        Ok(test_accuracy)
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let path = self.checkpoint_path();
        save_checkpoint(&self.state, self.epoch, &self.config, &path)?;
        Ok(path)
    }

    fn write_divergence(&self, snapshot: &DivergenceSnapshot) {
        let path = self.config.run.output_dir.join("divergence.json");
        if let Ok(text) = serde_json::to_string_pretty(snapshot) {
            let _ = fs::write(path, text);
        }
    }

    /// Runs the remaining epochs of the configured budget and writes the
    /// final checkpoint.
    pub fn run(mut self) -> Result<ExperimentOutcome> {
        let mut final_test_accuracy = self.records.last().and_then(|r| r.test_accuracy);
        while self.epoch < self.config.run.epochs {
            if let Some(acc) = self.run_epoch()? {
                final_test_accuracy = Some(acc);
            }
        }
        let checkpoint_path = self.save_checkpoint()?;
        Ok(ExperimentOutcome {
            records: self.records,
            final_test_accuracy,
            metrics_path: self.config.run.output_dir.join(METRICS_FILE),
            checkpoint_path,
            state: self.state,
        })
    }
}

fn check_data(config: &TrainConfig, state: &TrainState, train: &Dataset, test: &Dataset) -> Result<()> {
    let spec = state.target();
    for (name, ds) in [("train", train), ("test", test)] {
        if ds.shape() != spec.input_shape {
            return Err(Error::Data(format!(
                "{name} split has examples of shape {:?} but the target expects {:?}",
                ds.shape(),
                spec.input_shape
            )));
        }
        if ds.class_count() != spec.class_count {
            return Err(Error::Data(format!(
                "{name} split has {} classes but the target has {} outputs",
                ds.class_count(),
                spec.class_count
            )));
        }
    }
    if train.is_empty() && config.run.epochs > 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(())
}

/// Loads the configured data and runs the whole experiment.
pub fn run_experiment(config: &TrainConfig) -> Result<ExperimentOutcome> {
    let (train, test) = load_datasets(config)?;
    Experiment::start(config.clone(), &train, &test)?.run()
}
