//! Error statistics between predicted and reference trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{MechError, Result};
use crate::integrators::Trajectory;
use crate::systems::{hamiltonian, PhaseState, SystemSpec};

/// Time grids of compared trajectories must agree to this absolute tolerance.
pub const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub std: f64,
    pub var: f64,
    pub n_points: usize,
}

impl MetricsReport {
    /// Statistics of a pooled residual population (population variance).
    pub fn from_residuals(r: &[f64]) -> Result<Self> {
        if r.is_empty() {
            return Err(MechError::EmptyBatch);
        }
        if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
            return Err(MechError::NonFinite(format!("residual {bad}")));
        }
        let n = r.len() as f64;
        let mse = r.iter().map(|v| v * v).sum::<f64>() / n;
        let mae = r.iter().map(|v| v.abs()).sum::<f64>() / n;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mse,
            mae,
            rmse: mse.sqrt(),
            std: var.sqrt(),
            var,
            n_points: r.len(),
        })
    }

    pub const KEYS: [&'static str; 5] = ["mse", "mae", "rmse", "std", "var"];

    pub fn values(&self) -> [f64; 5] {
        [self.mse, self.mae, self.rmse, self.std, self.var]
    }
}

fn check_pair(pred: &Trajectory, truth: &Trajectory) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(MechError::dims("state layout", truth.dim(), pred.dim()));
    }
    if pred.len() != truth.len() {
        return Err(MechError::dims("time grid length", truth.len(), pred.len()));
    }
    if let Some((i, (a, b))) = pred
        .times()
        .iter()
        .zip(truth.times())
        .enumerate()
        .find(|(_, (a, b))| (*a - *b).abs() > GRID_TOL)
    {
        return Err(MechError::dims("time grid", format!("t[{i}] = {b}"), a));
    }
    Ok(())
}

/// `pred - truth`, row-major over time and components.
pub fn residuals(pred: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    Ok(pred.states().iter().zip(truth.states().iter()).map(|(p, t)| p - t).collect())
}

pub fn trajectory_metrics(pred: &Trajectory, truth: &Trajectory) -> Result<MetricsReport> {
    MetricsReport::from_residuals(&residuals(pred, truth)?)
}

/// Metrics over the residuals of several trajectory pairs pooled together.
pub fn pooled_metrics<'a>(pairs: impl IntoIterator<Item = (&'a Trajectory, &'a Trajectory)>) -> Result<MetricsReport> {
    let mut all = Vec::new();
    for (p, t) in pairs {
        all.extend(residuals(p, t)?);
    }
    MetricsReport::from_residuals(&all)
}

/// One report per state component, pooled over all pairs.
pub fn component_metrics<'a>(pairs: impl IntoIterator<Item = (&'a Trajectory, &'a Trajectory)>) -> Result<Vec<MetricsReport>> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (p, t) in pairs {
        check_pair(p, t)?;
        if columns.is_empty() {
            columns = vec![Vec::new(); p.dim()];
        } else if columns.len() != p.dim() {
            return Err(MechError::dims("state layout", columns.len(), p.dim()));
        }
        for (c, col) in columns.iter_mut().enumerate() {
            col.extend(p.states().column(c).iter().zip(t.states().column(c)).map(|(a, b)| a - b));
        }
    }
    if columns.is_empty() {
        return Err(MechError::EmptyBatch);
    }
    columns.iter().map(|c| MetricsReport::from_residuals(c)).collect()
}

/// `max_t |e(t) - e(0)| / max(|e(0)|, 1)` and the per-sample series.
pub fn relative_drift(series: &[f64]) -> Result<(f64, Vec<f64>)> {
    let Some(&e0) = series.first() else {
        return Err(MechError::EmptyBatch);
    };
    let scale = e0.abs().max(1.0);
    let drift: Vec<f64> = series.iter().map(|e| (e - e0).abs() / scale).collect();
    if drift.iter().any(|d| !d.is_finite()) {
        return Err(MechError::NonFinite("energy series".into()));
    }
    Ok((drift.iter().copied().fold(0.0, f64::max), drift))
}

/// Relative drift of the analytic Hamiltonian along a `(q, p)` trajectory.
pub fn energy_drift(sys: &SystemSpec, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
    if !sys.kind().is_conservative() {
        return Err(MechError::Unsupported(format!(
            "energy drift of the non-conservative {} system",
            sys.kind().name()
        )));
    }
    if !traj.dim().is_multiple_of(2) {
        return Err(MechError::dims("phase dimension (even)", traj.dim() + 1, traj.dim()));
    }
    let dof = traj.dim() / 2;
    let energies = (0..traj.len())
        .map(|i| {
            let y = traj.state(i);
            hamiltonian(sys, &PhaseState::hamiltonian(&y[..dof], &y[dof..])?)
        })
        .collect::<Result<Vec<_>>>()?;
    relative_drift(&energies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{leapfrog_integrate, rk45_integrate, IntegratorConfig};
    use crate::systems::{HamiltonianField, SystemKind};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn traj(values: &[f64], dim: usize) -> Trajectory {
        let n = values.len() / dim;
        Trajectory::new(
            (0..n).map(|i| i as f64 * 0.1).collect(),
            Array2::from_shape_vec((n, dim), values.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hand_residuals() {
        let zero = traj(&[0.0, 0.0], 1);
        let m = trajectory_metrics(&traj(&[1.0, -1.0], 1), &zero).unwrap();
        assert_eq!(m.values(), [1.0, 1.0, 1.0, 1.0, 1.0]);
        let m = trajectory_metrics(&traj(&[0.0, 2.0], 1), &zero).unwrap();
        assert_eq!((m.mse, m.mae, m.var, m.std), (2.0, 1.0, 1.0, 1.0));
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.n_points, 2);
        let same = trajectory_metrics(&zero, &zero).unwrap();
        assert_eq!(same.values(), [0.0; 5]);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = traj(&[0.0, 1.0, 2.0, 3.0], 2);
        let b = traj(&[0.0, 1.0, 2.0, 3.0], 1);
        assert!(matches!(trajectory_metrics(&a, &b), Err(MechError::DimensionMismatch { .. })));
        let shifted = Trajectory::new(vec![0.0, 0.2], a.states().clone()).unwrap();
        assert!(trajectory_metrics(&a, &shifted).is_err());
    }

    #[test]
    fn pooled_equals_concatenated() {
        let (a, b) = (traj(&[1.0, 2.0, 3.0, 4.0], 2), traj(&[0.5, 0.5, 0.5, 0.5], 2));
        let (c, d) = (traj(&[-1.0, 0.0], 2), traj(&[1.0, 1.0], 2));
        let pooled = pooled_metrics([(&a, &b), (&c, &d)]).unwrap();
        let direct = MetricsReport::from_residuals(&[0.5, 1.5, 2.5, 3.5, -2.0, -1.0]).unwrap();
        assert_eq!(pooled, direct);
        let comps = component_metrics([(&a, &b), (&c, &d)]).unwrap();
        assert_eq!(comps[0], MetricsReport::from_residuals(&[0.5, 2.5, -2.0]).unwrap());
        assert_eq!(comps[1].n_points, 3);
    }

    #[test]
    fn constant_trajectory_has_no_drift() {
        let sys = SystemSpec::default_for(SystemKind::Pendulum);
        let t = traj(&[0.3, 0.1, 0.3, 0.1, 0.3, 0.1], 2);
        let (max, series) = energy_drift(&sys, &t).unwrap();
        assert_eq!(max, 0.0);
        assert_eq!(series.len(), 3);
    }

    #[test]
    fn bouncing_ball_drift_is_rejected() {
        let sys = SystemSpec::default_for(SystemKind::BouncingBall);
        assert!(matches!(energy_drift(&sys, &traj(&[1.0, 0.0], 2)), Err(MechError::Unsupported(_))));
    }

    #[test]
    fn rk45_mass_spring_conserves_energy() {
        let sys = SystemSpec::default_for(SystemKind::MassSpring);
        let field = HamiltonianField::new(&sys, 1).unwrap();
        let times: Vec<f64> = (0..=200).map(|i| i as f64 * 0.1).collect();
        let t = rk45_integrate(|_, y| field.eval(y), &[1.0, 0.0], &times, &IntegratorConfig::rk45(1e-9, 1e-12)).unwrap();
        assert!(energy_drift(&sys, &t).unwrap().0 < 1e-6);
    }

    #[test]
    fn leapfrog_mass_spring_drift_stays_bounded() {
        let sys = SystemSpec::default_for(SystemKind::MassSpring);
        let SystemSpec::MassSpring { mass, stiffness } = sys else { unreachable!() };
        let t = leapfrog_integrate(
            |q: &[f64]| Ok(vec![stiffness * q[0]]),
            |p: &[f64]| Ok(vec![p[0] / mass]),
            &[1.0, 0.0],
            0.0,
            0.1,
            10_000,
        )
        .unwrap();
        let (max, _) = energy_drift(&sys, &t).unwrap();
        assert!(max < 1e-2, "{max}");
    }

    fn residual_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, 1..60)
    }

    proptest! {
        #[test]
        fn identities_hold(r in residual_vec()) {
            let m = MetricsReport::from_residuals(&r).unwrap();
            prop_assert!(m.values().iter().all(|v| *v >= 0.0));
            if m.mse > 0.0 {
                prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-12 * m.mse);
            }
            if m.var > 0.0 {
                prop_assert!((m.std * m.std - m.var).abs() <= 1e-12 * m.var);
            }
        }

        #[test]
        fn scale_law(r in residual_vec(), c in 0.01..100.0f64) {
            let a = MetricsReport::from_residuals(&r).unwrap();
            let scaled: Vec<f64> = r.iter().map(|v| c * v).collect();
            let b = MetricsReport::from_residuals(&scaled).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-10 * y.abs().max(1e-300);
            prop_assert!(close(b.mae, c * a.mae));
            prop_assert!(close(b.rmse, c * a.rmse));
            prop_assert!(close(b.mse, c * c * a.mse));
            prop_assert!((b.std - c * a.std).abs() <= 1e-9 * (c * a.mae).max(1e-300));
            prop_assert!((b.var - c * c * a.var).abs() <= 1e-9 * (c * c * a.mse).max(1e-300));
        }

        #[test]
        fn permutation_invariance(r in residual_vec(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = r.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = MetricsReport::from_residuals(&r).unwrap();
            let b = MetricsReport::from_residuals(&shuffled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * a.mse.max(a.mae).max(1e-300));
            }
        }
    }
}
