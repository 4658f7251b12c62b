//! Deterministic minibatch training, optimizers and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{rng_for, DerivativeDataset, ExperimentConfig, ExperimentData, ModelKind, OptimizerKind, SequenceDataset, SHUFFLE_STREAM};
use crate::diff_engine::{MlpParams, MlpSpec};
use crate::error::{MechError, Result};
use crate::integrators::Trajectory;
use crate::models::{srnn_windows, AnalyticEnergy, EnergyNet, HnnModel, LnnModel, LossGraph, Model, SrnnModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed of the minibatch shuffle.
    pub seed: u64,
    /// Leapfrog steps per SRNN training window.
    pub srnn_window: usize,
    /// Write a checkpoint into `checkpoint_dir` every this many epochs
    /// (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            optimizer: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            seed: cfg.seed,
            srnn_window: cfg.srnn_window,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MechError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and epsilon > 0");
        }
        if self.srnn_window == 0 {
            return bad("srnn_window must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `θ ← θ - lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.learning_rate },
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.scaled_add(-*lr, g);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub optimizer_steps: usize,
}

/// Training data of either shape.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Derivative(&'a DerivativeDataset),
    Sequence(&'a SequenceDataset),
}

impl<'a> TrainData<'a> {
    /// The training side of an experiment.
    pub fn train_split(data: &'a ExperimentData) -> Self {
        match data {
            ExperimentData::Derivative { train, .. } => TrainData::Derivative(train),
            ExperimentData::Sequence { train, .. } => TrainData::Sequence(train),
        }
    }

    pub fn config(&self) -> &'a ExperimentConfig {
        match self {
            TrainData::Derivative(d) => d.config(),
            TrainData::Sequence(d) => d.config(),
        }
    }
}

/// What a per-epoch callback sees.
pub struct EpochEnd<'a> {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub model: &'a Model,
}

/// Trains `model` for exactly `cfg.epochs` epochs.
pub fn train(model: Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    train_with(model, data, cfg, |_| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: Model,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let batches = Batcher::new(&model, data, cfg)?;
    let loss = batches.loss_graph(&model)?;
    let mut opt = Optimizer::new(cfg);
    let mut rng = rng_for(cfg.seed, SHUFFLE_STREAM);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let plan = batches.plan(&mut rng);
        let mut weighted = 0.0;
        let mut count = 0usize;
        for (b, batch) in plan.iter().enumerate() {
            let (x, y) = batches.assemble(batch)?;
            let diverged = |reason: String| MechError::TrainingDiverged { epoch, batch: b + 1, reason };
            let (value, grads) = loss.value_and_gradient(&model, &x, &y).map_err(|e| match e {
                MechError::NonFinite(_) | MechError::Degenerate { .. } => diverged(e.to_string()),
                other => other,
            })?;
            opt.step(model.param_arrays_mut(), &grads);
            steps += 1;
            if !model.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
            weighted += value * x.nrows() as f64;
            count += x.nrows();
        }
        let mean_loss = weighted / count as f64;
        epoch_losses.push(mean_loss);
        if let (Some(dir), true) = (&cfg.checkpoint_dir, cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            save_checkpoint(&model, data.config(), cfg.seed, epoch, &dir.join(format!("epoch-{epoch:05}.json")))?;
        }
        on_epoch(&EpochEnd {
            epoch,
            mean_loss,
            model: &model,
        })?;
    }
    let report = TrainReport {
        epoch_losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        optimizer_steps: steps,
    };
    Ok((model, report))
}

/// Minibatch source: shuffled rows, or one random window per trajectory.
enum Batcher<'a> {
    Rows {
        data: &'a DerivativeDataset,
        batch_size: usize,
    },
    Windows {
        data: &'a SequenceDataset,
        steps: usize,
        batch_size: usize,
    },
}

impl<'a> Batcher<'a> {
    fn new(model: &Model, data: TrainData<'a>, cfg: &TrainConfig) -> Result<Self> {
        let kind = data.config().model;
        if kind != model.kind() {
            return Err(MechError::InvalidConfig(format!("{} data for a {} model", kind, model.kind())));
        }
        if data.config().dof() != model.dof() {
            return Err(MechError::dims("model degrees of freedom", data.config().dof(), model.dof()));
        }
        match data {
            TrainData::Derivative(d) => {
                if d.is_empty() {
                    return Err(MechError::EmptyBatch);
                }
                Ok(Batcher::Rows {
                    data: d,
                    batch_size: cfg.batch_size,
                })
            }
            TrainData::Sequence(d) => {
                let len = d.trajectories().first().map_or(0, Trajectory::len);
                if len < 2 {
                    return Err(MechError::EmptyBatch);
                }
                Ok(Batcher::Windows {
                    data: d,
                    steps: cfg.srnn_window.min(len - 1),
                    batch_size: cfg.batch_size,
                })
            }
        }
    }

    fn loss_graph(&self, model: &Model) -> Result<LossGraph> {
        match self {
            Batcher::Rows { .. } => LossGraph::for_model(model, 1, 1.0, None),
            Batcher::Windows { data, steps, .. } => LossGraph::for_model(model, *steps, data.dt(), data.config().train_restitution()),
        }
    }

    /// Batches of row indices, or of `(trajectory, start)` pairs encoded as
    /// `trajectory * stride + start`.
    fn plan<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        match self {
            Batcher::Rows { data, batch_size } => {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(rng);
                order.chunks(*batch_size).map(<[usize]>::to_vec).collect()
            }
            Batcher::Windows { data, steps, batch_size } => {
                let len = data.trajectories()[0].len();
                let mut windows: Vec<usize> = (0..data.n_trajectories()).map(|t| t * len + rng.random_range(0..len - steps)).collect();
                windows.shuffle(rng);
                windows.chunks(*batch_size).map(<[usize]>::to_vec).collect()
            }
        }
    }

    fn assemble(&self, batch: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        match self {
            Batcher::Rows { data, .. } => Ok((data.inputs().select(Axis(0), batch), data.labels().select(Axis(0), batch))),
            Batcher::Windows { data, steps, .. } => {
                let len = data.trajectories()[0].len();
                let windows: Vec<(&Trajectory, usize)> = batch.iter().map(|&w| (&data.trajectories()[w / len], w % len)).collect();
                srnn_windows(&windows, *steps)
            }
        }
    }
}

/// Mean loss of `model` over a whole dataset (no update).
pub fn dataset_loss(model: &Model, data: TrainData<'_>, window: usize) -> Result<f64> {
    match data {
        TrainData::Derivative(d) => LossGraph::for_model(model, 1, 1.0, None)?.value(model, d.inputs(), d.labels()),
        TrainData::Sequence(d) => {
            let len = d.trajectories().first().map_or(0, Trajectory::len);
            if len < 2 {
                return Err(MechError::EmptyBatch);
            }
            let steps = window.min(len - 1);
            let windows: Vec<(&Trajectory, usize)> = d.trajectories().iter().map(|t| (t, 0)).collect();
            let (x, y) = srnn_windows(&windows, steps)?;
            LossGraph::for_model(model, steps, d.dt(), d.config().train_restitution())?.value(model, &x, &y)
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "mechbench-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NetRecord {
    Mlp {
        role: String,
        spec: MlpSpec,
        /// Arrays in layer order `W0, b0, W1, b1, ...`, each row-major.
        params: Vec<Vec<f64>>,
    },
    Analytic {
        role: String,
        energy: AnalyticEnergy,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    model: ModelKind,
    seed: u64,
    epochs_trained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lnn_regularization: Option<f64>,
    nets: Vec<NetRecord>,
    config: ExperimentConfig,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epochs_trained: usize,
}

fn checkpoint_doc(model: &Model, config: &ExperimentConfig, seed: u64, epochs_trained: usize) -> Result<CheckpointDoc> {
    let nets = model
        .nets()
        .into_iter()
        .map(|(role, net)| match net {
            EnergyNet::Mlp(p) => {
                if !p.is_finite() {
                    return Err(MechError::NonFinite(format!("parameters of net `{role}`")));
                }
                Ok(NetRecord::Mlp {
                    role: role.to_string(),
                    spec: p.spec().clone(),
                    params: p.arrays().iter().map(|a| a.iter().copied().collect()).collect(),
                })
            }
            EnergyNet::Analytic(a) => Ok(NetRecord::Analytic {
                role: role.to_string(),
                energy: *a,
            }),
        })
        .collect::<Result<_>>()?;
    Ok(CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.kind(),
        seed,
        epochs_trained,
        lnn_regularization: match model {
            Model::Lnn(m) => Some(m.regularization),
            _ => None,
        },
        nets,
        config: config.clone(),
    })
}

/// Serializes a checkpoint document; identical inputs give identical text.
pub fn checkpoint_text(model: &Model, config: &ExperimentConfig, seed: u64, epochs_trained: usize) -> Result<String> {
    let doc = checkpoint_doc(model, config, seed, epochs_trained)?;
    serde_json::to_string_pretty(&doc)
        .map(|s| s + "\n")
        .map_err(|e| MechError::InvalidConfig(e.to_string()))
}

pub fn save_checkpoint(model: &Model, config: &ExperimentConfig, seed: u64, epochs_trained: usize, path: &Path) -> Result<()> {
    let text = checkpoint_text(model, config, seed, epochs_trained)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MechError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| MechError::io(path, e))
}

fn net_from_record(rec: NetRecord, path: &Path) -> Result<(String, EnergyNet)> {
    match rec {
        NetRecord::Mlp { role, spec, params } => {
            let spec = MlpSpec::new(spec.layer_sizes().to_vec(), spec.activation()).map_err(|e| MechError::malformed(path, format!("net `{role}`: {e}")))?;
            let shapes: Vec<(usize, usize)> = spec.layer_sizes().windows(2).flat_map(|w| [(w[0], w[1]), (1, w[1])]).collect();
            if shapes.len() != params.len() {
                return Err(MechError::malformed(
                    path,
                    format!("net `{role}` has {} arrays, expected {}", params.len(), shapes.len()),
                ));
            }
            let arrays = shapes
                .into_iter()
                .zip(params)
                .map(|(shape, flat)| Array2::from_shape_vec(shape, flat).map_err(|e| MechError::malformed(path, format!("net `{role}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let p = MlpParams::from_arrays(spec, arrays).map_err(|e| MechError::malformed(path, e))?;
            Ok((role, EnergyNet::Mlp(p)))
        }
        NetRecord::Analytic { role, energy } => Ok((role, EnergyNet::Analytic(energy))),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| MechError::io(path, e))?;
    parse_checkpoint(&text, path)
}

/// Parses checkpoint text; `path` is only used in error messages.
pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MechError::malformed(path, e))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(MechError::malformed(path, "not a checkpoint document"));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(MechError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| MechError::malformed(path, e))?;
    doc.config.validate()?;
    let mut nets = doc.nets.into_iter().map(|r| net_from_record(r, path)).collect::<Result<Vec<_>>>()?;
    let roles: Vec<&str> = nets.iter().map(|(r, _)| r.as_str()).collect();
    let model = match (doc.model, roles.as_slice()) {
        (ModelKind::Hnn, ["h"]) => Model::Hnn(HnnModel::new(nets.remove(0).1)?),
        (ModelKind::Lnn, ["l"]) => Model::Lnn(LnnModel::new(nets.remove(0).1, doc.lnn_regularization.unwrap_or(0.0))?),
        (ModelKind::Srnn, ["k", "v"]) => {
            let v = nets.remove(1).1;
            let k = nets.remove(0).1;
            Model::Srnn(SrnnModel::new(k, v)?)
        }
        (kind, roles) => {
            return Err(MechError::malformed(path, format!("{kind} checkpoint with nets {roles:?}")));
        }
    };
    Ok(Checkpoint {
        model,
        config: doc.config,
        seed: doc.seed,
        epochs_trained: doc.epochs_trained,
    })
}

/// Loss history as `epoch,mean_loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MechError::malformed(path, e))?;
    let io = |e: csv::Error| MechError::malformed(path, e);
    w.write_record(["epoch", "mean_loss"]).map_err(io)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| MechError::io(path, e))
}
