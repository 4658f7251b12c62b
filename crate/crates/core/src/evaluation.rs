//! Rollouts from test initial states and their comparison with the truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{ground_truth, ExperimentConfig, ExperimentData};
use crate::error::{MechError, Result};
use crate::integrators::Trajectory;
use crate::metrics::{component_metrics, pooled_metrics, relative_drift, trajectory_metrics, MetricsReport};
use crate::models::{HnnModel, Model, RolloutConfig};
use crate::parallel::par_map;
use crate::systems::PhaseState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryOutcome {
    /// Position within the test split.
    pub index: usize,
    pub truth: Trajectory,
    /// The rollout, or why it failed.
    pub prediction: std::result::Result<Trajectory, String>,
    pub metrics: Option<MetricsReport>,
}

impl TrajectoryOutcome {
    pub fn failed(&self) -> bool {
        self.metrics.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub config: ExperimentConfig,
    pub outcomes: Vec<TrajectoryOutcome>,
    /// Pooled over every trajectory that rolled out; `None` when none did.
    pub metrics: Option<MetricsReport>,
    /// Per state component, pooled the same way.
    pub components: Vec<MetricsReport>,
}

impl Evaluation {
    pub fn n_failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.failed()).count()
    }

    pub fn record(&self) -> MetricsRecord {
        let m = self.metrics;
        MetricsRecord {
            preset: self.config.preset.clone(),
            system: self.config.kind().name().to_string(),
            model: self.config.model.to_string(),
            seed: self.config.seed,
            mse: m.map(|m| m.mse),
            mae: m.map(|m| m.mae),
            rmse: m.map(|m| m.rmse),
            std: m.map(|m| m.std),
            var: m.map(|m| m.var),
            n_points: m.map_or(0, |m| m.n_points),
            n_trajectories: self.outcomes.len(),
            n_failed: self.n_failed(),
        }
    }
}

/// Flat JSON form of an evaluation; metrics are `null` when every rollout
/// failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub preset: String,
    pub system: String,
    pub model: String,
    pub seed: u64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub std: Option<f64>,
    pub var: Option<f64>,
    pub n_points: usize,
    pub n_trajectories: usize,
    pub n_failed: usize,
}

impl MetricsRecord {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.mse, self.mae, self.rmse, self.std, self.var]
    }
}

/// Reference trajectories for evaluation. Bouncing-ball truths are
/// re-integrated at the rollout restitution when it differs from the one
/// used for the data.
pub fn test_truths(data: &ExperimentData) -> Result<Vec<Trajectory>> {
    let cfg = data.config();
    let stored: Vec<Trajectory> = match data {
        ExperimentData::Derivative { test, .. } => (0..test.n_trajectories()).map(|i| test.trajectory(i)).collect::<Result<_>>()?,
        ExperimentData::Sequence { test, .. } => test.trajectories().to_vec(),
    };
    match (cfg.train_restitution(), cfg.rollout_restitution()) {
        (Some(a), Some(b)) if a != b => stored.iter().map(|t| ground_truth(cfg, t.state(0), t.times(), Some(b))).collect(),
        _ => Ok(stored),
    }
}

/// Rolls `model` out from the first state of every test trajectory on its
/// time grid. Failures are recorded per trajectory rather than returned.
pub fn evaluate(model: &Model, data: &ExperimentData, workers: usize) -> Result<Evaluation> {
    let cfg = data.config();
    if model.kind() != cfg.model || model.dof() != cfg.dof() {
        return Err(MechError::InvalidConfig(format!(
            "{} model with {} degrees of freedom cannot be evaluated on {}",
            model.kind(),
            model.dof(),
            cfg.preset
        )));
    }
    let truths = test_truths(data)?;
    if truths.is_empty() {
        return Err(MechError::EmptyBatch);
    }
    let rc = RolloutConfig::from_experiment(cfg);
    let convention = cfg.convention();
    let predictions = par_map(truths.len(), workers, |i| {
        let truth = &truths[i];
        let outcome = PhaseState::from_vec(truth.state(0).to_vec(), convention)
            .and_then(|s0| model.rollout(&s0, truth.times(), &rc))
            .and_then(|p| trajectory_metrics(&p, truth).map(|m| (p, m)));
        Ok(outcome.map_err(|e| e.to_string()))
    })?;
    let outcomes: Vec<TrajectoryOutcome> = truths
        .into_iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (truth, pred))| match pred {
            Ok((p, m)) => TrajectoryOutcome {
                index,
                truth,
                prediction: Ok(p),
                metrics: Some(m),
            },
            Err(e) => TrajectoryOutcome {
                index,
                truth,
                prediction: Err(e),
                metrics: None,
            },
        })
        .collect();
    let pairs: Vec<(&Trajectory, &Trajectory)> = outcomes
        .iter()
        .filter_map(|o| o.prediction.as_ref().ok().filter(|_| !o.failed()).map(|p| (p, &o.truth)))
        .collect();
    let (metrics, components) = if pairs.is_empty() {
        (None, Vec::new())
    } else {
        (Some(pooled_metrics(pairs.iter().copied())?), component_metrics(pairs.iter().copied())?)
    };
    Ok(Evaluation {
        config: cfg.clone(),
        outcomes,
        metrics,
        components,
    })
}

/// Relative drift of the learned `H_θ` along a `(q, p)` trajectory.
pub fn learned_energy_drift(model: &HnnModel, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
    let energies = (0..traj.len()).map(|i| model.net.energy(traj.state(i))).collect::<Result<Vec<_>>>()?;
    relative_drift(&energies)
}

/// Prediction-versus-truth table: `t`, `true_<name>`..., `pred_<name>`...
/// Prediction cells are left empty for a failed rollout.
pub fn write_comparison_csv(path: &Path, names: &[String], outcome: &TrajectoryOutcome) -> Result<()> {
    let err = |e: csv::Error| MechError::malformed(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let header = std::iter::once("t".to_string())
        .chain(names.iter().map(|n| format!("true_{n}")))
        .chain(names.iter().map(|n| format!("pred_{n}")));
    w.write_record(header).map_err(err)?;
    let pred = outcome.prediction.as_ref().ok();
    for (i, t) in outcome.truth.times().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(outcome.truth.state(i).iter().map(f64::to_string));
        match pred {
            Some(p) => row.extend(p.state(i).iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), names.len())),
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| MechError::io(path, e))
}
