use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff_engine::Activation;
use crate::error::{MechError, Result};
use crate::integrators::IntegratorConfig;
use crate::systems::{Convention, SystemKind, SystemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hnn,
    Lnn,
    Srnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Hnn, ModelKind::Lnn, ModelKind::Srnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hnn => "hnn",
            ModelKind::Lnn => "lnn",
            ModelKind::Srnn => "srnn",
        }
    }

    /// Convention of the states the model consumes.
    pub fn convention(self) -> Convention {
        match self {
            ModelKind::Lnn => Convention::Lagrangian,
            ModelKind::Hnn | ModelKind::Srnn => Convention::Hamiltonian,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = MechError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MechError::InvalidConfig(format!("unknown model `{s}`")))
    }
}

/// How initial conditions are drawn. Bounds and values are in the model's
/// convention: momenta for HNN and SRNN, velocities for LNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ic", rename_all = "kebab-case")]
pub enum IcSampler {
    /// Independent uniform draws per component; equal bounds pin a component.
    Box {
        ic_low: Vec<f64>,
        ic_high: Vec<f64>,
    },
    Fixed {
        ic_value: Vec<f64>,
    },
    /// Three bodies near the figure-eight choreography: positions scaled by
    /// `s ~ U[ic_scale_low, ic_scale_high]`, velocities by `1/√s` (an exact
    /// rescaling of the periodic orbit), then perturbed by `U[-ic_noise,
    /// ic_noise]` with the centre-of-mass motion removed. A separately
    /// generated test set uses `test_ic_noise` instead.
    FigureEight {
        ic_scale_low: f64,
        ic_scale_high: f64,
        ic_noise: f64,
        #[serde(default)]
        test_ic_noise: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Everything needed to reproduce one experiment: data generation, the
/// network, training and evaluation.
///
/// Serialized as a flat key-value document (TOML or JSON); the system and
/// sampler constants appear as top-level keys next to their `system` and
/// `ic` tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Preset identifier, `<system>/<model>`.
    pub preset: String,
    pub model: ModelKind,
    #[serde(flatten)]
    pub system: SystemSpec,
    /// Trajectories in the pool that is split into train and test.
    pub n_trajectories: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Grid points per trajectory for HNN and LNN data, spaced
    /// `(t_end - t_start) / samples_per_trajectory` apart.
    pub samples_per_trajectory: usize,
    /// Fixed step of SRNN sequences and of Euler contact stepping.
    pub dt: f64,
    #[serde(flatten)]
    pub sampler: IcSampler,
    pub split_ratio: f64,
    /// When positive, a separately generated test set replaces the split.
    pub test_trajectories: usize,
    /// End time of the separate test set.
    pub test_t_end: f64,
    pub seed: u64,
    /// Affine layers per network.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Leapfrog steps per SRNN training window.
    pub srnn_window: usize,
    /// Ridge added to the LNN velocity Hessian before solving.
    pub lnn_regularization: f64,
    /// Restitution used when rolling out trained bouncing-ball models.
    pub eval_restitution: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl ExperimentConfig {
    pub fn kind(&self) -> SystemKind {
        self.system.kind()
    }

    pub fn convention(&self) -> Convention {
        self.model.convention()
    }

    pub fn dof(&self) -> usize {
        self.system.dof(self.convention())
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Grid of a derivative-dataset trajectory.
    pub fn sample_times(&self) -> Vec<f64> {
        let n = self.samples_per_trajectory;
        let step = self.span() / n as f64;
        (0..n).map(|i| self.t_start + i as f64 * step).collect()
    }

    /// Grid of a fixed-step sequence over `[t_start, t_end]`: `⌊span/dt⌋ + 1`
    /// points.
    pub fn sequence_times(&self, t_end: f64) -> Vec<f64> {
        let n = ((t_end - self.t_start) / self.dt + 1e-9).floor() as usize;
        (0..=n).map(|i| self.t_start + i as f64 * self.dt).collect()
    }

    pub fn has_separate_test_set(&self) -> bool {
        self.test_trajectories > 0
    }

    /// Contact restitution during data generation.
    pub fn train_restitution(&self) -> Option<f64> {
        match self.system {
            SystemSpec::BouncingBall { restitution, .. } => Some(restitution),
            _ => None,
        }
    }

    /// Contact restitution for rollouts of trained models.
    pub fn rollout_restitution(&self) -> Option<f64> {
        self.train_restitution().map(|_| self.eval_restitution)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            dt: self.dt,
            ..IntegratorConfig::rk45(self.rtol, self.atol)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MechError::InvalidConfig(msg));
        self.system.validate()?;
        let expected = format!("{}/{}", self.kind(), self.model);
        if self.preset != expected && !self.preset.starts_with(&format!("{expected}@")) {
            return bad(format!("preset `{}` does not match {expected}", self.preset));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        if !self.has_separate_test_set() && self.n_trajectories < 2 {
            return bad("a train/test split needs at least two trajectories".into());
        }
        if !(self.t_end > self.t_start) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return bad(format!("empty time span [{}, {}]", self.t_start, self.t_end));
        }
        if self.model != ModelKind::Srnn && self.samples_per_trajectory < 2 {
            return bad("samples_per_trajectory must be at least 2".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.model == ModelKind::Srnn && self.sequence_times(self.t_end).len() < 2 {
            return bad("SRNN sequences need at least two grid points".into());
        }
        if self.has_separate_test_set() && !(self.test_t_end > self.t_start) {
            return bad("test_t_end must exceed t_start".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if self.depth == 0 || self.width == 0 {
            return bad("network depth and width must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam moments need beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        if self.srnn_window == 0 {
            return bad("srnn_window must be positive".into());
        }
        if !(self.lnn_regularization >= 0.0) {
            return bad("lnn_regularization must be nonnegative".into());
        }
        if self.train_restitution().is_some() && !(self.eval_restitution > 0.0 && self.eval_restitution <= 1.0) {
            return bad(format!("eval_restitution must lie in (0, 1], got {}", self.eval_restitution));
        }
        self.integrator().validate()?;
        let width = 2 * self.dof();
        match &self.sampler {
            IcSampler::Box { ic_low, ic_high } => {
                if ic_low.len() != width || ic_high.len() != width {
                    return bad(format!("ic bounds need {width} entries, got {} and {}", ic_low.len(), ic_high.len()));
                }
                if ic_low.iter().zip(ic_high).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
                    return bad("ic_low must not exceed ic_high".into());
                }
            }
            IcSampler::Fixed { ic_value } => {
                if ic_value.len() != width {
                    return bad(format!("ic_value needs {width} entries, got {}", ic_value.len()));
                }
                self.system.check_values(ic_value)?;
            }
            IcSampler::FigureEight {
                ic_scale_low,
                ic_scale_high,
                ic_noise,
                test_ic_noise,
            } => {
                if self.kind() != SystemKind::ThreeBody {
                    return bad("the figure-eight sampler is for the three-body system".into());
                }
                if !(*ic_scale_low > 0.0 && ic_scale_low <= ic_scale_high) || !(*ic_noise >= 0.0 && *test_ic_noise >= 0.0) {
                    return bad("figure-eight sampler needs 0 < scale_low <= scale_high and noise >= 0".into());
                }
            }
        }
        if !self.system.accepts_dof(self.dof()) {
            return bad("state layout does not match the system".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MechError::InvalidConfig(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides, each value parsed as a TOML value
    /// (bare words are taken as strings).
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        let mut keys = Vec::new();
        for (key, raw) in overrides {
            table.insert(key.to_string(), parse_value(raw));
            keys.push(key);
        }
        Self::from_table(table, &keys)
    }

    /// True when both configs generate the same data; model, training and
    /// evaluation settings are ignored.
    pub fn same_data(&self, other: &Self) -> bool {
        let mut a = other.clone();
        a.preset = self.preset.clone();
        a.depth = self.depth;
        a.width = self.width;
        a.activation = self.activation;
        a.epochs = self.epochs;
        a.batch_size = self.batch_size;
        a.learning_rate = self.learning_rate;
        a.optimizer = self.optimizer;
        a.beta1 = self.beta1;
        a.beta2 = self.beta2;
        a.epsilon = self.epsilon;
        a.srnn_window = self.srnn_window;
        a.lnn_regularization = self.lnn_regularization;
        a.eval_restitution = self.eval_restitution;
        a == *self
    }

    /// Overrides from a partial config file; keys absent from the file keep
    /// their current values.
    pub fn with_toml_overrides(&self, text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        let keys: Vec<&str> = file.keys().map(String::as_str).collect();
        for (k, v) in &file {
            table.insert(k.clone(), v.clone());
        }
        Self::from_table(table, &keys)
    }

    fn from_table(table: toml::Table, keys: &[&str]) -> Result<Self> {
        let text = toml::to_string(&table).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        let cfg = Self::from_toml(&text)?;
        // flattened fields cannot deny unknown keys, so check after the round trip
        let known: toml::Table = toml::from_str(&cfg.to_toml()?).map_err(|e| MechError::InvalidConfig(e.to_string()))?;
        if let Some(k) = keys.iter().find(|k| !known.contains_key(**k)) {
            return Err(MechError::InvalidConfig(format!("unknown configuration key `{k}`")));
        }
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
