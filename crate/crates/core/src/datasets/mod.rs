//! Seeded data generation for every (system, model) experiment.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with the experiment
//! seed; each consumer draws from its own stream so results do not depend on
//! generation order or thread count.

mod config;
mod io;
mod presets;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{ExperimentConfig, IcSampler, ModelKind, OptimizerKind};
pub use io::{read_dataset, write_dataset, DatasetManifest, SplitManifest, MANIFEST_FILE, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use presets::{parse_preset_name, preset, preset_names, Scale};

use crate::error::{MechError, Result};
use crate::integrators::{integrate_with_contact, rk45_integrate, Trajectory};
use crate::parallel::{par_map, worker_count};
use crate::systems::{hamiltonian_eom, lagrangian_accel, Convention, HamiltonianField, LagrangianField, PhaseState, SystemKind, SystemSpec};

/// Stream of the i-th trajectory of the train/test pool.
pub const POOL_STREAM: u64 = 0;
/// Base stream of separately generated test trajectories.
pub const TEST_STREAM: u64 = 1 << 32;
/// Stream of the train/test shuffle.
pub const SPLIT_STREAM: u64 = 1 << 33;
/// Stream of the per-epoch minibatch shuffle.
pub const SHUFFLE_STREAM: u64 = 1 << 34;
/// Streams of network initialisation (`+0`, `+1`, ... per network).
pub const INIT_STREAM: u64 = 1 << 35;

/// A ChaCha8 generator on the given stream of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// State pairs and their time derivatives, grouped by trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeDataset {
    config: ExperimentConfig,
    times: Vec<f64>,
    inputs: Array2<f64>,
    labels: Array2<f64>,
    lengths: Vec<usize>,
}

impl DerivativeDataset {
    pub fn new(config: ExperimentConfig, times: Vec<f64>, inputs: Array2<f64>, labels: Array2<f64>, lengths: Vec<usize>) -> Result<Self> {
        let rows = inputs.nrows();
        if labels.nrows() != rows || times.len() != rows {
            return Err(MechError::dims(
                "dataset rows",
                rows,
                format!("{} labels, {} times", labels.nrows(), times.len()),
            ));
        }
        if lengths.iter().sum::<usize>() != rows {
            return Err(MechError::dims("trajectory lengths", rows, lengths.iter().sum::<usize>()));
        }
        let width = 2 * config.dof();
        if inputs.ncols() != width {
            return Err(MechError::dims("dataset inputs", width, inputs.ncols()));
        }
        if labels.ncols() != label_width(&config) {
            return Err(MechError::dims("dataset labels", label_width(&config), labels.ncols()));
        }
        Ok(Self {
            config,
            times,
            inputs,
            labels,
            lengths,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn convention(&self) -> Convention {
        self.config.convention()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    /// Rows per trajectory.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_trajectories(&self) -> usize {
        self.lengths.len()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.config.system.state_names(self.convention(), self.config.dof())
    }

    pub fn label_names(&self) -> Vec<String> {
        label_names(&self.config)
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.lengths[..i].iter().sum();
        start..start + self.lengths[i]
    }

    /// Times and states of trajectory `i`, which double as its ground truth.
    pub fn trajectory(&self, i: usize) -> Result<Trajectory> {
        if i >= self.n_trajectories() {
            return Err(MechError::IndexOutOfRange {
                index: i,
                dim: self.n_trajectories(),
            });
        }
        let r = self.range(i);
        Trajectory::new(self.times[r.clone()].to_vec(), self.inputs.slice(s![r, ..]).to_owned())
    }

    pub fn trajectory_labels(&self, i: usize) -> ArrayView2<'_, f64> {
        let r = self.range(i);
        self.labels.slice(s![r, ..])
    }

    /// The trajectories at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let rows: Vec<usize> = indices.iter().flat_map(|&i| self.range(i)).collect();
        Self {
            config: self.config.clone(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            inputs: self.inputs.select(Axis(0), &rows),
            labels: self.labels.select(Axis(0), &rows),
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
        }
    }
}

/// Fixed-step trajectories on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    config: ExperimentConfig,
    dt: f64,
    trajectories: Vec<Trajectory>,
}

impl SequenceDataset {
    pub fn new(config: ExperimentConfig, dt: f64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let width = 2 * config.dof();
        for (i, t) in trajectories.iter().enumerate() {
            if t.dim() != width {
                return Err(MechError::Trajectory {
                    index: i,
                    source: Box::new(MechError::dims("sequence state", width, t.dim())),
                });
            }
            if t.len() >= 2 {
                crate::integrators::uniform_step(t.times(), 1e-9).map_err(|e| MechError::Trajectory { index: i, source: Box::new(e) })?;
            }
        }
        if let Some(first) = trajectories.first() {
            if trajectories.iter().any(|t| t.len() != first.len()) {
                return Err(MechError::InvalidConfig("sequence trajectories differ in length".into()));
            }
        }
        Ok(Self { config, dt, trajectories })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.config.system.state_names(self.config.convention(), self.config.dof())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            config: self.config.clone(),
            dt: self.dt,
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
        }
    }
}

/// Datasets that can be split by whole trajectories.
pub trait TrajectorySet: Sized {
    fn n_trajectories(&self) -> usize;
    fn select(&self, indices: &[usize]) -> Self;
}

impl TrajectorySet for DerivativeDataset {
    fn n_trajectories(&self) -> usize {
        DerivativeDataset::n_trajectories(self)
    }

    fn select(&self, indices: &[usize]) -> Self {
        DerivativeDataset::select(self, indices)
    }
}

impl TrajectorySet for SequenceDataset {
    fn n_trajectories(&self) -> usize {
        SequenceDataset::n_trajectories(self)
    }

    fn select(&self, indices: &[usize]) -> Self {
        SequenceDataset::select(self, indices)
    }
}

/// Trajectory indices of a seeded train/test partition; each side is sorted.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(MechError::InvalidConfig(format!("cannot split {n} trajectories")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MechError::InvalidConfig(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, SPLIT_STREAM));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits whole trajectories into train and test sets.
pub fn train_test_split<D: TrajectorySet>(dataset: &D, ratio: f64, seed: u64) -> Result<(D, D)> {
    let (train, test) = split_indices(dataset.n_trajectories(), ratio, seed)?;
    Ok((dataset.select(&train), dataset.select(&test)))
}

/// Label column names: `d<name>_dt` for HNN, `<q>_ddot` for LNN.
pub fn label_names(cfg: &ExperimentConfig) -> Vec<String> {
    let names = cfg.system.state_names(cfg.convention(), cfg.dof());
    match cfg.convention() {
        Convention::Hamiltonian => names.iter().map(|n| format!("d{n}_dt")).collect(),
        Convention::Lagrangian => names[..cfg.dof()].iter().map(|n| format!("{n}_ddot")).collect(),
    }
}

fn label_width(cfg: &ExperimentConfig) -> usize {
    match cfg.convention() {
        Convention::Hamiltonian => 2 * cfg.dof(),
        Convention::Lagrangian => cfg.dof(),
    }
}

// Figure-eight choreography of three unit masses with G = 1.
const EIGHT_X1: [f64; 2] = [0.97000436, -0.24308753];
const EIGHT_V3: [f64; 2] = [-0.93240737, -0.86473146];

/// Draws one initial condition in the model's convention.
pub fn sample_initial_condition<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<PhaseState> {
    draw(cfg, rng, false)
}

/// Like [`sample_initial_condition`], for the separately generated test set.
pub fn sample_test_initial_condition<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<PhaseState> {
    draw(cfg, rng, true)
}

fn draw<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R, test: bool) -> Result<PhaseState> {
    let values = match &cfg.sampler {
        IcSampler::Box { ic_low, ic_high } => ic_low
            .iter()
            .zip(ic_high)
            .map(|(&lo, &hi)| if lo == hi { lo } else { rng.random_range(lo..hi) })
            .collect(),
        IcSampler::Fixed { ic_value } => ic_value.clone(),
        IcSampler::FigureEight {
            ic_scale_low,
            ic_scale_high,
            ic_noise,
            test_ic_noise,
        } => {
            let noise = if test { *test_ic_noise } else { *ic_noise };
            figure_eight_state(cfg, *ic_scale_low, *ic_scale_high, noise, rng)?
        }
    };
    PhaseState::from_vec(values, cfg.convention())
}

fn figure_eight_state<R: Rng + ?Sized>(cfg: &ExperimentConfig, scale_low: f64, scale_high: f64, noise: f64, rng: &mut R) -> Result<Vec<f64>> {
    if cfg.kind() != SystemKind::ThreeBody {
        return Err(MechError::InvalidConfig("the figure-eight sampler is for the three-body system".into()));
    }
    let d = cfg.dof() / 3;
    let scale = if scale_low == scale_high {
        scale_low
    } else {
        rng.random_range(scale_low..scale_high)
    };
    let speed = 1.0 / scale.sqrt();
    let mut pos = vec![0.0; 3 * d];
    let mut vel = vec![0.0; 3 * d];
    for k in 0..2 {
        pos[k] = scale * EIGHT_X1[k];
        pos[d + k] = -scale * EIGHT_X1[k];
        vel[2 * d + k] = speed * EIGHT_V3[k];
        vel[k] = -0.5 * speed * EIGHT_V3[k];
        vel[d + k] = -0.5 * speed * EIGHT_V3[k];
    }
    let mut jitter = |v: &mut f64| {
        if noise > 0.0 {
            *v += rng.random_range(-noise..noise);
        }
    };
    pos.iter_mut().for_each(&mut jitter);
    vel.iter_mut().for_each(&mut jitter);
    let m = cfg.system.masses();
    let total: f64 = m.iter().sum();
    for k in 0..d {
        let com: f64 = (0..3).map(|b| m[b] * pos[b * d + k]).sum::<f64>() / total;
        let vcm: f64 = (0..3).map(|b| m[b] * vel[b * d + k]).sum::<f64>() / total;
        for b in 0..3 {
            pos[b * d + k] -= com;
            vel[b * d + k] -= vcm;
        }
    }
    if cfg.convention() == Convention::Hamiltonian {
        for (i, v) in vel.iter_mut().enumerate() {
            *v *= m[i / d];
        }
    }
    pos.extend(vel);
    Ok(pos)
}

/// Ground-truth vector field in the config's convention.
enum TruthField {
    H(HamiltonianField),
    L(LagrangianField),
}

impl TruthField {
    fn new(sys: &SystemSpec, convention: Convention, dof: usize) -> Result<Self> {
        Ok(match convention {
            Convention::Hamiltonian => TruthField::H(HamiltonianField::new(sys, dof)?),
            Convention::Lagrangian => TruthField::L(LagrangianField::new(sys, dof)?),
        })
    }

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            TruthField::H(f) => f.eval(y),
            TruthField::L(f) => f.derivative(y),
        }
    }
}

/// Integrates the true dynamics of `cfg`'s system from `y0` onto `times`
/// (uniform). The bouncing ball uses forward Euler with one step per grid
/// interval and the contact rule at `restitution`; every other system uses
/// RK45 at the config's tolerances.
pub fn ground_truth(cfg: &ExperimentConfig, y0: &[f64], times: &[f64], restitution: Option<f64>) -> Result<Trajectory> {
    let field = TruthField::new(&cfg.system, cfg.convention(), cfg.dof())?;
    match restitution {
        Some(rho) => {
            let step = crate::integrators::uniform_step(times, 1e-9)?;
            integrate_with_contact(|_, y| field.eval(y), y0, times[0], step, times.len() - 1, rho)
        }
        None => rk45_integrate(|_, y| field.eval(y), y0, times, &cfg.integrator()),
    }
}

fn wrap(index: usize) -> impl FnOnce(MechError) -> MechError {
    move |e| MechError::Trajectory { index, source: Box::new(e) }
}

fn label_row(cfg: &ExperimentConfig, state: &[f64]) -> Result<Vec<f64>> {
    let s = PhaseState::from_vec(state.to_vec(), cfg.convention())?;
    match cfg.convention() {
        Convention::Hamiltonian => hamiltonian_eom(&cfg.system, &s),
        Convention::Lagrangian => lagrangian_accel(&cfg.system, &s),
    }
}

fn derivative_trajectory(cfg: &ExperimentConfig, stream: u64, test: bool, times: &[f64]) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
    let ic = draw(cfg, &mut rng_for(cfg.seed, stream), test)?;
    let traj = ground_truth(cfg, ic.as_slice(), times, cfg.train_restitution())?;
    let (times, states) = traj.into_parts();
    let mut labels = Array2::zeros((states.nrows(), label_width(cfg)));
    for (r, row) in states.rows().into_iter().enumerate() {
        let l = label_row(cfg, row.as_slice().expect("standard layout"))?;
        labels.row_mut(r).assign(&ndarray::ArrayView1::from(&l[..]));
    }
    Ok((times, states, labels))
}

fn check_model(cfg: &ExperimentConfig, sequence: bool) -> Result<()> {
    cfg.validate()?;
    if sequence != (cfg.model == ModelKind::Srnn) {
        let want = if sequence { "srnn" } else { "hnn or lnn" };
        return Err(MechError::InvalidConfig(format!("model {} where {want} is required", cfg.model)));
    }
    Ok(())
}

fn derivative_set(cfg: &ExperimentConfig, n: usize, base_stream: u64, times: &[f64], workers: usize) -> Result<DerivativeDataset> {
    let test = base_stream == TEST_STREAM;
    let parts = par_map(n, workers, |i| derivative_trajectory(cfg, base_stream + i as u64, test, times).map_err(wrap(i)))?;
    let lengths = parts.iter().map(|p| p.0.len()).collect();
    let all_times = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let inputs = ndarray::concatenate(Axis(0), &parts.iter().map(|p| p.1.view()).collect::<Vec<_>>()).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
    let labels = ndarray::concatenate(Axis(0), &parts.iter().map(|p| p.2.view()).collect::<Vec<_>>()).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
    DerivativeDataset::new(cfg.clone(), all_times, inputs, labels, lengths)
}

fn sequence_set(cfg: &ExperimentConfig, n: usize, base_stream: u64, t_end: f64, workers: usize) -> Result<SequenceDataset> {
    let times = cfg.sequence_times(t_end);
    let trajectories = par_map(n, workers, |i| {
        let ic = draw(cfg, &mut rng_for(cfg.seed, base_stream + i as u64), base_stream == TEST_STREAM)?;
        ground_truth(cfg, ic.as_slice(), &times, cfg.train_restitution()).map_err(wrap(i))
    })?;
    SequenceDataset::new(cfg.clone(), cfg.dt, trajectories)
}

/// The full trajectory pool of an HNN or LNN experiment:
/// `n_trajectories × samples_per_trajectory` labelled rows.
pub fn generate_derivative_dataset(cfg: &ExperimentConfig) -> Result<DerivativeDataset> {
    check_model(cfg, false)?;
    derivative_set(cfg, cfg.n_trajectories, POOL_STREAM, &cfg.sample_times(), worker_count())
}

/// The trajectory pool of an SRNN experiment on the fixed `dt` grid.
pub fn generate_sequence_dataset(cfg: &ExperimentConfig) -> Result<SequenceDataset> {
    check_model(cfg, true)?;
    sequence_set(cfg, cfg.n_trajectories, POOL_STREAM, cfg.t_end, worker_count())
}

/// Train and test data of one experiment.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ExperimentData {
    Derivative { train: DerivativeDataset, test: DerivativeDataset },
    Sequence { train: SequenceDataset, test: SequenceDataset },
}

impl ExperimentData {
    pub fn config(&self) -> &ExperimentConfig {
        match self {
            ExperimentData::Derivative { train, .. } => train.config(),
            ExperimentData::Sequence { train, .. } => train.config(),
        }
    }

    /// Rows (derivative data) or grid points (sequences) on each side.
    pub fn sample_counts(&self) -> (usize, usize) {
        match self {
            ExperimentData::Derivative { train, test } => (train.len(), test.len()),
            ExperimentData::Sequence { train, test } => {
                let count = |d: &SequenceDataset| d.trajectories().iter().map(Trajectory::len).sum();
                (count(train), count(test))
            }
        }
    }

    /// Swaps in `cfg` for training and evaluation settings; fails unless it
    /// describes the same data.
    pub fn with_config(self, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.same_data(self.config()) {
            return Err(MechError::InvalidConfig(format!(
                "dataset was generated for a different configuration than `{}`",
                cfg.preset
            )));
        }
        Ok(match self {
            ExperimentData::Derivative { mut train, mut test } => {
                train.config = cfg.clone();
                test.config = cfg;
                ExperimentData::Derivative { train, test }
            }
            ExperimentData::Sequence { mut train, mut test } => {
                train.config = cfg.clone();
                test.config = cfg;
                ExperimentData::Sequence { train, test }
            }
        })
    }

    pub fn trajectory_counts(&self) -> (usize, usize) {
        match self {
            ExperimentData::Derivative { train, test } => (train.n_trajectories(), test.n_trajectories()),
            ExperimentData::Sequence { train, test } => (train.n_trajectories(), test.n_trajectories()),
        }
    }
}

/// Generates the train and test sets of an experiment: a seeded split of
/// the pool, or the whole pool for training plus a separately generated test
/// set when `test_trajectories > 0`.
pub fn generate(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    generate_with_workers(cfg, worker_count())
}

pub fn generate_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentData> {
    cfg.validate()?;
    if cfg.model == ModelKind::Srnn {
        let pool = sequence_set(cfg, cfg.n_trajectories, POOL_STREAM, cfg.t_end, workers)?;
        let (train, test) = if cfg.has_separate_test_set() {
            let test = sequence_set(cfg, cfg.test_trajectories, TEST_STREAM, cfg.test_t_end, workers)?;
            (pool, test)
        } else {
            train_test_split(&pool, cfg.split_ratio, cfg.seed)?
        };
        Ok(ExperimentData::Sequence { train, test })
    } else {
        let pool = derivative_set(cfg, cfg.n_trajectories, POOL_STREAM, &cfg.sample_times(), workers)?;
        let (train, test) = if cfg.has_separate_test_set() {
            let step = cfg.span() / cfg.samples_per_trajectory as f64;
            let n = ((cfg.test_t_end - cfg.t_start) / step + 1e-9).floor() as usize;
            let times: Vec<f64> = (0..n.max(2)).map(|i| cfg.t_start + i as f64 * step).collect();
            let test = derivative_set(cfg, cfg.test_trajectories, TEST_STREAM, &times, workers)?;
            (pool, test)
        } else {
            train_test_split(&pool, cfg.split_ratio, cfg.seed)?
        };
        Ok(ExperimentData::Derivative { train, test })
    }
}
