//! Closed-form energies of the six benchmark systems and the equations of
//! motion derived from them by automatic differentiation.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diff_engine::{euler_lagrange, symplectic_field, Bindings, Graph, NodeId};
use crate::error::{MechError, Result};

/// Closest approach treated as a collision in the three-body problem.
pub const MIN_SEPARATION: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    MassSpring,
    Pendulum,
    SpringPendulum,
    DoublePendulum,
    BouncingBall,
    ThreeBody,
}

impl SystemKind {
    pub const ALL: [SystemKind; 6] = [
        SystemKind::MassSpring,
        SystemKind::Pendulum,
        SystemKind::SpringPendulum,
        SystemKind::DoublePendulum,
        SystemKind::BouncingBall,
        SystemKind::ThreeBody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::MassSpring => "mass-spring",
            SystemKind::Pendulum => "pendulum",
            SystemKind::SpringPendulum => "spring-pendulum",
            SystemKind::DoublePendulum => "double-pendulum",
            SystemKind::BouncingBall => "bouncing-ball",
            SystemKind::ThreeBody => "three-body",
        }
    }

    /// `H = K(p) + V(q)`.
    pub fn is_separable(self) -> bool {
        !matches!(self, SystemKind::SpringPendulum | SystemKind::DoublePendulum)
    }

    /// Every system except the bouncing ball, whose contacts dissipate.
    pub fn is_conservative(self) -> bool {
        self != SystemKind::BouncingBall
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = MechError;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MechError::InvalidConfig(format!("unknown system `{s}`")))
    }
}

/// Whether the second half of a state holds momenta or velocities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    Hamiltonian,
    Lagrangian,
}

/// Physical system and its constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "kebab-case")]
pub enum SystemSpec {
    MassSpring {
        mass: f64,
        stiffness: f64,
    },
    Pendulum {
        mass: f64,
        length: f64,
        gravity: f64,
    },
    SpringPendulum {
        mass: f64,
        stiffness: f64,
        rest_length: f64,
        gravity: f64,
    },
    DoublePendulum {
        mass1: f64,
        mass2: f64,
        length1: f64,
        length2: f64,
        gravity: f64,
    },
    BouncingBall {
        mass: f64,
        gravity: f64,
        restitution: f64,
    },
    ThreeBody {
        gravitational_constant: f64,
        mass1: f64,
        mass2: f64,
        mass3: f64,
    },
}

/// A point in phase space: coordinates followed by momenta or velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    values: Vec<f64>,
    convention: Convention,
}

impl PhaseState {
    pub fn new(q: &[f64], second: &[f64], convention: Convention) -> Result<Self> {
        if q.len() != second.len() {
            return Err(MechError::dims("phase state halves", q.len(), second.len()));
        }
        let mut values = q.to_vec();
        values.extend_from_slice(second);
        Self::from_vec(values, convention)
    }

    pub fn from_vec(values: Vec<f64>, convention: Convention) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(MechError::dims("phase state length", "positive even", values.len()));
        }
        Ok(Self { values, convention })
    }

    pub fn hamiltonian(q: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(q, p, Convention::Hamiltonian)
    }

    pub fn lagrangian(q: &[f64], qdot: &[f64]) -> Result<Self> {
        Self::new(q, qdot, Convention::Lagrangian)
    }

    pub fn dof(&self) -> usize {
        self.values.len() / 2
    }

    pub fn q(&self) -> &[f64] {
        &self.values[..self.dof()]
    }

    /// Momenta or velocities, depending on [`PhaseState::convention`].
    pub fn second(&self) -> &[f64] {
        &self.values[self.dof()..]
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

fn col(g: &mut Graph, x: NodeId, i: usize) -> NodeId {
    g.slice_cols(x, i, 1)
}

// `Σ_j a[:, j]` as a `batch x 1` node
fn row_sum(g: &mut Graph, a: NodeId, x: NodeId) -> NodeId {
    let like = col(g, x, 0);
    g.sum_like(a, like)
}

fn scaled(g: &mut Graph, a: NodeId, c: f64) -> NodeId {
    g.scale(a, c)
}

impl SystemSpec {
    pub fn default_for(kind: SystemKind) -> Self {
        match kind {
            SystemKind::MassSpring => SystemSpec::MassSpring { mass: 1.0, stiffness: 1.0 },
            SystemKind::Pendulum => SystemSpec::Pendulum {
                mass: 1.0,
                length: 1.0,
                gravity: 9.8,
            },
            SystemKind::SpringPendulum => SystemSpec::SpringPendulum {
                mass: 1.0,
                stiffness: 1.0,
                rest_length: 1.0,
                gravity: 9.8,
            },
            SystemKind::DoublePendulum => SystemSpec::DoublePendulum {
                mass1: 1.0,
                mass2: 1.0,
                length1: 1.0,
                length2: 1.0,
                gravity: 9.8,
            },
            SystemKind::BouncingBall => SystemSpec::BouncingBall {
                mass: 1.0,
                gravity: 9.8,
                restitution: 0.8,
            },
            SystemKind::ThreeBody => SystemSpec::ThreeBody {
                gravitational_constant: 1.0,
                mass1: 1.0,
                mass2: 1.0,
                mass3: 1.0,
            },
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            SystemSpec::MassSpring { .. } => SystemKind::MassSpring,
            SystemSpec::Pendulum { .. } => SystemKind::Pendulum,
            SystemSpec::SpringPendulum { .. } => SystemKind::SpringPendulum,
            SystemSpec::DoublePendulum { .. } => SystemKind::DoublePendulum,
            SystemSpec::BouncingBall { .. } => SystemKind::BouncingBall,
            SystemSpec::ThreeBody { .. } => SystemKind::ThreeBody,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: Vec<(&str, f64)> = match *self {
            SystemSpec::MassSpring { mass, stiffness } => vec![("mass", mass), ("stiffness", stiffness)],
            SystemSpec::Pendulum { mass, length, gravity } => {
                vec![("mass", mass), ("length", length), ("gravity", gravity)]
            }
            SystemSpec::SpringPendulum {
                mass,
                stiffness,
                rest_length,
                gravity,
            } => vec![("mass", mass), ("stiffness", stiffness), ("rest_length", rest_length), ("gravity", gravity)],
            SystemSpec::DoublePendulum {
                mass1,
                mass2,
                length1,
                length2,
                gravity,
            } => vec![
                ("mass1", mass1),
                ("mass2", mass2),
                ("length1", length1),
                ("length2", length2),
                ("gravity", gravity),
            ],
            SystemSpec::BouncingBall { mass, gravity, restitution } => {
                if !(restitution > 0.0 && restitution <= 1.0) {
                    return Err(MechError::InvalidConfig(format!("restitution must lie in (0, 1], got {restitution}")));
                }
                vec![("mass", mass), ("gravity", gravity)]
            }
            SystemSpec::ThreeBody {
                gravitational_constant,
                mass1,
                mass2,
                mass3,
            } => vec![
                ("gravitational_constant", gravitational_constant),
                ("mass1", mass1),
                ("mass2", mass2),
                ("mass3", mass3),
            ],
        };
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MechError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Degrees of freedom of the standard layout. The three-body problem is
    /// planar in the Hamiltonian convention and spatial in the Lagrangian
    /// one; [`SystemSpec::accepts_dof`] allows either.
    pub fn dof(&self, convention: Convention) -> usize {
        match (self.kind(), convention) {
            (SystemKind::MassSpring | SystemKind::Pendulum | SystemKind::BouncingBall, _) => 1,
            (SystemKind::SpringPendulum | SystemKind::DoublePendulum, _) => 2,
            (SystemKind::ThreeBody, Convention::Hamiltonian) => 6,
            (SystemKind::ThreeBody, Convention::Lagrangian) => 9,
        }
    }

    pub fn accepts_dof(&self, dof: usize) -> bool {
        match self.kind() {
            SystemKind::ThreeBody => dof == 6 || dof == 9,
            _ => dof == self.dof(Convention::Hamiltonian),
        }
    }

    pub(crate) fn masses(&self) -> [f64; 3] {
        match *self {
            SystemSpec::ThreeBody { mass1, mass2, mass3, .. } => [mass1, mass2, mass3],
            _ => unreachable!("only the three-body system has three masses"),
        }
    }

    /// Column names of a state in `convention` with `dof` coordinates.
    pub fn state_names(&self, convention: Convention, dof: usize) -> Vec<String> {
        let h = convention == Convention::Hamiltonian;
        let pair = |q: &str, p: &str, v: &str| -> [String; 2] { [q.to_string(), if h { p } else { v }.to_string()] };
        let names: Vec<[String; 2]> = match self.kind() {
            SystemKind::MassSpring | SystemKind::BouncingBall => vec![pair("q", "p", "q_dot")],
            SystemKind::Pendulum => vec![pair("theta", "p_theta", "theta_dot")],
            SystemKind::SpringPendulum => vec![pair("r", "p_r", "r_dot"), pair("theta", "p_theta", "theta_dot")],
            SystemKind::DoublePendulum => {
                vec![pair("theta1", "p1", "theta1_dot"), pair("theta2", "p2", "theta2_dot")]
            }
            SystemKind::ThreeBody => {
                let axes = ["x", "y", "z"];
                let d = dof / 3;
                (1..=3)
                    .flat_map(|b| {
                        axes[..d]
                            .iter()
                            .map(move |a| [format!("{a}{b}"), if h { format!("p{a}{b}") } else { format!("v{a}{b}") }])
                    })
                    .collect()
            }
        };
        let (q, s): (Vec<String>, Vec<String>) = names.into_iter().map(|[a, b]| (a, b)).unzip();
        q.into_iter().chain(s).collect()
    }

    fn check(&self, s: &PhaseState, convention: Convention) -> Result<()> {
        if s.convention != convention {
            return Err(MechError::InvalidConfig(format!("expected a {convention:?} state, got {:?}", s.convention)));
        }
        self.check_values(s.as_slice())
    }

    /// Layout and singularity checks on a raw state vector.
    pub fn check_values(&self, y: &[f64]) -> Result<()> {
        if !y.len().is_multiple_of(2) || !self.accepts_dof(y.len() / 2) {
            return Err(MechError::dims("state layout", 2 * self.dof(Convention::Hamiltonian), y.len()));
        }
        match self.kind() {
            SystemKind::SpringPendulum if y[0] <= 0.0 => Err(MechError::SingularConfiguration(format!(
                "spring-pendulum radius r = {} must be positive",
                y[0]
            ))),
            SystemKind::ThreeBody => {
                let d = y.len() / 6;
                for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                    let dist = (0..d).map(|k| (y[i * d + k] - y[j * d + k]).powi(2)).sum::<f64>().sqrt();
                    if dist < MIN_SEPARATION {
                        return Err(MechError::SingularConfiguration(format!("bodies {} and {} coincide", i + 1, j + 1)));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Kinetic energy `K(p)` of a separable system as a graph node, for a
    /// `batch x n` momentum node.
    pub fn kinetic_node(&self, g: &mut Graph, p: NodeId, dof: usize) -> Result<NodeId> {
        Ok(match *self {
            SystemSpec::MassSpring { mass, .. } | SystemSpec::BouncingBall { mass, .. } => {
                let p2 = g.square(p);
                scaled(g, p2, 0.5 / mass)
            }
            SystemSpec::Pendulum { mass, length, .. } => {
                let p2 = g.square(p);
                scaled(g, p2, 0.5 / (mass * length * length))
            }
            SystemSpec::ThreeBody { .. } => {
                let d = dof / 3;
                let mut acc = None;
                for (b, m) in self.masses().into_iter().enumerate() {
                    let pb = g.slice_cols(p, b * d, d);
                    let p2 = g.square(pb);
                    let s = row_sum(g, p2, p);
                    let t = scaled(g, s, 0.5 / m);
                    acc = Some(acc.map_or(t, |a| g.add(a, t)));
                }
                acc.expect("three bodies")
            }
            _ => return Err(MechError::Unsupported(format!("{} is not separable", self.kind()))),
        })
    }

    /// Potential energy `V(q)` of a separable system as a graph node.
    pub fn potential_node(&self, g: &mut Graph, q: NodeId, dof: usize) -> Result<NodeId> {
        Ok(match *self {
            SystemSpec::MassSpring { stiffness, .. } => {
                let q2 = g.square(q);
                scaled(g, q2, 0.5 * stiffness)
            }
            SystemSpec::Pendulum { mass, length, gravity } => {
                let c = g.cos(q);
                let one = g.scalar(1.0);
                let v = g.sub(one, c);
                scaled(g, v, mass * gravity * length)
            }
            SystemSpec::BouncingBall { mass, gravity, .. } => scaled(g, q, mass * gravity),
            SystemSpec::ThreeBody { gravitational_constant, .. } => {
                let d = dof / 3;
                let m = self.masses();
                let mut acc = None;
                for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                    let qi = g.slice_cols(q, i * d, d);
                    let qj = g.slice_cols(q, j * d, d);
                    let diff = g.sub(qi, qj);
                    let d2 = g.square(diff);
                    let s = row_sum(g, d2, q);
                    let r = g.sqrt(s);
                    let inv = g.recip(r);
                    let t = scaled(g, inv, -gravitational_constant * m[i] * m[j]);
                    acc = Some(acc.map_or(t, |a| g.add(a, t)));
                }
                acc.expect("three pairs")
            }
            _ => return Err(MechError::Unsupported(format!("{} is not separable", self.kind()))),
        })
    }

    /// `H` as a graph node of a `batch x 2n` state node in the Hamiltonian
    /// convention.
    pub fn hamiltonian_node(&self, g: &mut Graph, x: NodeId, dof: usize) -> Result<NodeId> {
        if !self.accepts_dof(dof) {
            return Err(MechError::dims("state layout", self.dof(Convention::Hamiltonian), dof));
        }
        if self.kind().is_separable() {
            let q = g.slice_cols(x, 0, dof);
            let p = g.slice_cols(x, dof, dof);
            let k = self.kinetic_node(g, p, dof)?;
            let v = self.potential_node(g, q, dof)?;
            return Ok(g.add(k, v));
        }
        Ok(match *self {
            SystemSpec::SpringPendulum {
                mass,
                stiffness,
                rest_length,
                gravity,
            } => {
                let (r, th, pr, pth) = (col(g, x, 0), col(g, x, 1), col(g, x, 2), col(g, x, 3));
                let pr2 = g.square(pr);
                let t1 = scaled(g, pr2, 0.5 / mass);
                let pth2 = g.square(pth);
                let r2 = g.square(r);
                let t2 = g.div(pth2, r2);
                let t2 = scaled(g, t2, 0.5 / mass);
                let c = g.cos(th);
                let rc = g.mul(r, c);
                let t3 = scaled(g, rc, mass * gravity);
                let l0 = g.scalar(rest_length);
                let ext = g.sub(r, l0);
                let ext2 = g.square(ext);
                let t4 = scaled(g, ext2, 0.5 * stiffness);
                let h = g.add(t1, t2);
                let h = g.add(h, t3);
                g.add(h, t4)
            }
            SystemSpec::DoublePendulum {
                mass1: m1,
                mass2: m2,
                length1: l1,
                length2: l2,
                gravity,
            } => {
                let (q1, q2, p1, p2) = (col(g, x, 0), col(g, x, 1), col(g, x, 2), col(g, x, 3));
                let dq = g.sub(q1, q2);
                let c = g.cos(dq);
                let s = g.sin(dq);
                let p1s = g.square(p1);
                let p2s = g.square(p2);
                let a = scaled(g, p1s, m2 * l2 * l2);
                let b = scaled(g, p2s, (m1 + m2) * l1 * l1);
                let p12 = g.mul(p1, p2);
                let cross = g.mul(p12, c);
                let cross = scaled(g, cross, 2.0 * m2 * l1 * l2);
                let num = g.add(a, b);
                let num = g.sub(num, cross);
                let s2 = g.square(s);
                let s2 = scaled(g, s2, m2);
                let m1n = g.scalar(m1);
                let den = g.add(m1n, s2);
                let den = scaled(g, den, 2.0 * l1 * l1 * l2 * l2);
                let t = g.div(num, den);
                let c1 = g.cos(q1);
                let c2 = g.cos(q2);
                let v1 = scaled(g, c1, -(m1 + m2) * gravity * l1);
                let v2 = scaled(g, c2, -m2 * gravity * l2);
                let h = g.add(t, v1);
                g.add(h, v2)
            }
            _ => unreachable!("separable systems handled above"),
        })
    }

    /// `L` as a graph node of a `batch x 2n` state node in the Lagrangian
    /// convention.
    pub fn lagrangian_node(&self, g: &mut Graph, x: NodeId, dof: usize) -> Result<NodeId> {
        if !self.accepts_dof(dof) {
            return Err(MechError::dims("state layout", self.dof(Convention::Lagrangian), dof));
        }
        Ok(match *self {
            SystemSpec::MassSpring { mass, stiffness } => {
                let (q, v) = (col(g, x, 0), col(g, x, 1));
                let v2 = g.square(v);
                let t = scaled(g, v2, 0.5 * mass);
                let q2 = g.square(q);
                let u = scaled(g, q2, 0.5 * stiffness);
                g.sub(t, u)
            }
            SystemSpec::Pendulum { mass, length, gravity } => {
                let (q, v) = (col(g, x, 0), col(g, x, 1));
                let v2 = g.square(v);
                let t = scaled(g, v2, 0.5 * mass * length * length);
                let c = g.cos(q);
                let one = g.scalar(1.0);
                let u = g.sub(one, c);
                let u = scaled(g, u, mass * gravity * length);
                g.sub(t, u)
            }
            SystemSpec::SpringPendulum {
                mass,
                stiffness,
                rest_length,
                gravity,
            } => {
                let (r, th, rd, thd) = (col(g, x, 0), col(g, x, 1), col(g, x, 2), col(g, x, 3));
                let rd2 = g.square(rd);
                let t1 = scaled(g, rd2, 0.5 * mass);
                let r2 = g.square(r);
                let thd2 = g.square(thd);
                let t2 = g.mul(r2, thd2);
                let t2 = scaled(g, t2, 0.5 * mass);
                let l0 = g.scalar(rest_length);
                let ext = g.sub(r, l0);
                let ext2 = g.square(ext);
                let u1 = scaled(g, ext2, 0.5 * stiffness);
                let c = g.cos(th);
                let rc = g.mul(r, c);
                let u2 = scaled(g, rc, mass * gravity);
                let l = g.add(t1, t2);
                let l = g.sub(l, u1);
                g.sub(l, u2)
            }
            SystemSpec::DoublePendulum {
                mass1: m1,
                mass2: m2,
                length1: l1,
                length2: l2,
                gravity,
            } => {
                let (q1, q2, v1, v2) = (col(g, x, 0), col(g, x, 1), col(g, x, 2), col(g, x, 3));
                let v1s = g.square(v1);
                let v2s = g.square(v2);
                let a = scaled(g, v1s, 0.5 * (m1 + m2) * l1 * l1);
                let b = scaled(g, v2s, 0.5 * m2 * l2 * l2);
                let dq = g.sub(q1, q2);
                let c = g.cos(dq);
                let v12 = g.mul(v1, v2);
                let cross = g.mul(v12, c);
                let cross = scaled(g, cross, m2 * l1 * l2);
                let c1 = g.cos(q1);
                let c2 = g.cos(q2);
                // L = T - V with V = -(m1 + m2) g l1 cos q1 - m2 g l2 cos q2
                let u1 = scaled(g, c1, (m1 + m2) * gravity * l1);
                let u2 = scaled(g, c2, m2 * gravity * l2);
                let l = g.add(a, b);
                let l = g.add(l, cross);
                let l = g.add(l, u1);
                g.add(l, u2)
            }
            SystemSpec::BouncingBall { mass, gravity, .. } => {
                let (q, v) = (col(g, x, 0), col(g, x, 1));
                let v2 = g.square(v);
                let t = scaled(g, v2, 0.5 * mass);
                let u = scaled(g, q, mass * gravity);
                g.sub(t, u)
            }
            SystemSpec::ThreeBody { .. } => {
                let q = g.slice_cols(x, 0, dof);
                let v = g.slice_cols(x, dof, dof);
                let d = dof / 3;
                let mut t = None;
                for (b, m) in self.masses().into_iter().enumerate() {
                    let vb = g.slice_cols(v, b * d, d);
                    let v2 = g.square(vb);
                    let s = row_sum(g, v2, v);
                    let tb = scaled(g, s, 0.5 * m);
                    t = Some(t.map_or(tb, |a| g.add(a, tb)));
                }
                let u = self.potential_node(g, q, dof)?;
                g.sub(t.expect("three bodies"), u)
            }
        })
    }
}

fn eval_scalar(f: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>, y: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf();
    let out = f(&mut g, x)?;
    let xv = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row vector");
    Ok(g.eval_one(out, &Bindings::new().with(x, &xv))?[[0, 0]])
}

/// Total energy `H(q, p)`.
pub fn hamiltonian(sys: &SystemSpec, s: &PhaseState) -> Result<f64> {
    sys.check(s, Convention::Hamiltonian)?;
    let dof = s.dof();
    match *sys {
        // closed forms evaluated directly; the graph route is cross-checked in tests
        SystemSpec::MassSpring { mass, stiffness } => {
            let (q, p) = (s.q()[0], s.second()[0]);
            Ok(p * p / (2.0 * mass) + stiffness * q * q / 2.0)
        }
        SystemSpec::Pendulum { mass, length, gravity } => {
            let (q, p) = (s.q()[0], s.second()[0]);
            Ok(p * p / (2.0 * mass * length * length) + mass * gravity * length * (1.0 - q.cos()))
        }
        SystemSpec::BouncingBall { mass, gravity, .. } => {
            let (q, p) = (s.q()[0], s.second()[0]);
            Ok(p * p / (2.0 * mass) + mass * gravity * q)
        }
        _ => eval_scalar(|g, x| sys.hamiltonian_node(g, x, dof), s.as_slice()),
    }
}

/// `L(q, q̇) = T - V`.
pub fn lagrangian(sys: &SystemSpec, s: &PhaseState) -> Result<f64> {
    sys.check(s, Convention::Lagrangian)?;
    let dof = s.dof();
    eval_scalar(|g, x| sys.lagrangian_node(g, x, dof), s.as_slice())
}

/// Compiled symplectic gradient `(∂H/∂p, -∂H/∂q)` of an analytic `H`.
pub struct HamiltonianField {
    sys: SystemSpec,
    dof: usize,
    graph: Graph,
    x: NodeId,
    out: NodeId,
}

impl HamiltonianField {
    pub fn new(sys: &SystemSpec, dof: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let x = graph.leaf();
        let h = sys.hamiltonian_node(&mut graph, x, dof)?;
        let out = symplectic_field(&mut graph, h, x, dof);
        Ok(Self { sys: *sys, dof, graph, x, out })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != 2 * self.dof {
            return Err(MechError::dims("state", 2 * self.dof, y.len()));
        }
        self.sys.check_values(y)?;
        let xv = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row vector");
        Ok(self.eval_batch(&xv)?.into_iter().collect())
    }

    /// Rows of `states` are independent samples.
    pub fn eval_batch(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        self.graph.eval_one(self.out, &Bindings::new().with(self.x, states))
    }
}

/// Compiled ground-truth accelerations for a Lagrangian-convention state.
pub struct LagrangianField {
    sys: SystemSpec,
    dof: usize,
    compiled: Option<(Graph, NodeId, NodeId)>,
}

impl LagrangianField {
    pub fn new(sys: &SystemSpec, dof: usize) -> Result<Self> {
        if !sys.accepts_dof(dof) {
            return Err(MechError::dims("state layout", sys.dof(Convention::Lagrangian), dof));
        }
        let compiled = if sys.kind() == SystemKind::ThreeBody {
            None
        } else {
            let mut g = Graph::new();
            let x = g.leaf();
            let l = sys.lagrangian_node(&mut g, x, dof)?;
            let acc = euler_lagrange(&mut g, l, x, dof, 0.0);
            Some((g, x, acc))
        };
        Ok(Self { sys: *sys, dof, compiled })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// `q̈` at `(q, q̇)`.
    pub fn acceleration(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != 2 * self.dof {
            return Err(MechError::dims("state", 2 * self.dof, y.len()));
        }
        self.sys.check_values(y)?;
        match &self.compiled {
            None => three_body_accelerations(&y[..self.dof], &self.sys),
            Some((g, x, acc)) => {
                let xv = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row vector");
                Ok(g.eval_one(*acc, &Bindings::new().with(*x, &xv))?.into_iter().collect())
            }
        }
    }

    /// First-order form `(q̇, q̈)` for the integrators.
    pub fn derivative(&self, y: &[f64]) -> Result<Vec<f64>> {
        let acc = self.acceleration(y)?;
        let mut out = y[self.dof..].to_vec();
        out.extend(acc);
        Ok(out)
    }
}

/// Time derivative `(q̇, ṗ)` from Hamilton's equations.
pub fn hamiltonian_eom(sys: &SystemSpec, s: &PhaseState) -> Result<Vec<f64>> {
    sys.check(s, Convention::Hamiltonian)?;
    HamiltonianField::new(sys, s.dof())?.eval(s.as_slice())
}

/// Ground-truth `q̈` from the Euler-Lagrange equations.
pub fn lagrangian_accel(sys: &SystemSpec, s: &PhaseState) -> Result<Vec<f64>> {
    sys.check(s, Convention::Lagrangian)?;
    LagrangianField::new(sys, s.dof())?.acceleration(s.as_slice())
}

/// Pairwise Newtonian gravitational accelerations of three bodies.
///
/// `positions` holds the three position vectors back to back, planar or
/// spatial.
pub fn three_body_accelerations(positions: &[f64], sys: &SystemSpec) -> Result<Vec<f64>> {
    let SystemSpec::ThreeBody {
        gravitational_constant: big_g, ..
    } = *sys
    else {
        return Err(MechError::Unsupported(format!("three-body accelerations for {}", sys.kind())));
    };
    if positions.len() != 6 && positions.len() != 9 {
        return Err(MechError::dims("three-body positions", "6 or 9", positions.len()));
    }
    let d = positions.len() / 3;
    let m = sys.masses();
    let r = |i: usize| &positions[i * d..(i + 1) * d];
    let mut acc = vec![0.0; positions.len()];
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let diff: Vec<f64> = r(j).iter().zip(r(i)).map(|(a, b)| a - b).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dist < MIN_SEPARATION {
                return Err(MechError::SingularConfiguration(format!(
                    "bodies {} and {} coincide",
                    i.min(j) + 1,
                    i.max(j) + 1
                )));
            }
            let c = big_g * m[j] / (dist * dist * dist);
            for k in 0..d {
                acc[i * d + k] += c * diff[k];
            }
        }
    }
    Ok(acc)
}

/// Ground contact of the bouncing ball: when `q ≤ 0` and the ball is moving
/// down, the height is clamped to zero and the momentum reversed and scaled
/// by `ρ`. Other states are returned unchanged.
pub fn apply_contact(s: &PhaseState, restitution: f64) -> PhaseState {
    let mut out = s.clone();
    contact_in_place(&mut out.values, restitution);
    out
}

/// [`apply_contact`] on a raw one-dimensional state `[q, p]`.
pub fn contact_in_place(y: &mut [f64], restitution: f64) -> bool {
    if y[0] <= 0.0 && y[1] < 0.0 {
        y[0] = 0.0;
        y[1] *= -restitution;
        true
    } else {
        false
    }
}

/// Converts `(q, q̇)` to `(q, p)` with `p = ∂L/∂q̇`.
pub fn to_hamiltonian(sys: &SystemSpec, s: &PhaseState) -> Result<PhaseState> {
    sys.check(s, Convention::Lagrangian)?;
    let n = s.dof();
    let p = if sys.kind() == SystemKind::ThreeBody {
        let d = n / 3;
        let m = sys.masses();
        s.second().iter().enumerate().map(|(i, v)| m[i / d] * v).collect()
    } else {
        let mut g = Graph::new();
        let x = g.leaf();
        let l = sys.lagrangian_node(&mut g, x, n)?;
        let dl = g.grad(l, &[x])[0];
        let p = g.slice_cols(dl, n, n);
        let xv = Array2::from_shape_vec((1, 2 * n), s.as_slice().to_vec()).expect("row vector");
        g.eval_one(p, &Bindings::new().with(x, &xv))?.into_iter().collect::<Vec<_>>()
    };
    PhaseState::hamiltonian(s.q(), &p)
}

/// Converts `(q, p)` to `(q, q̇)` with `q̇ = ∂H/∂p`.
pub fn to_lagrangian(sys: &SystemSpec, s: &PhaseState) -> Result<PhaseState> {
    let f = hamiltonian_eom(sys, s)?;
    PhaseState::lagrangian(s.q(), &f[..s.dof()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms() -> SystemSpec {
        SystemSpec::default_for(SystemKind::MassSpring)
    }

    fn h(q: &[f64], p: &[f64]) -> PhaseState {
        PhaseState::hamiltonian(q, p).unwrap()
    }

    fn l(q: &[f64], v: &[f64]) -> PhaseState {
        PhaseState::lagrangian(q, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn energy_examples() {
        assert_eq!(hamiltonian(&ms(), &h(&[0.0], &[0.0])).unwrap(), 0.0);
        assert_eq!(hamiltonian(&ms(), &h(&[1.0], &[2.0])).unwrap(), 2.5);
        let pend = SystemSpec::default_for(SystemKind::Pendulum);
        assert_eq!(hamiltonian(&pend, &h(&[0.0], &[0.0])).unwrap(), 0.0);
        assert_eq!(lagrangian(&ms(), &l(&[0.0], &[0.0])).unwrap(), 0.0);
        assert_eq!(lagrangian(&ms(), &l(&[1.0], &[1.0])).unwrap(), 0.0);
        assert_eq!(lagrangian(&pend, &l(&[0.0], &[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn singular_configurations() {
        let sp = SystemSpec::default_for(SystemKind::SpringPendulum);
        assert!(matches!(
            hamiltonian(&sp, &h(&[0.0, 0.3], &[0.0, 0.0])),
            Err(MechError::SingularConfiguration(_))
        ));
        let tb = SystemSpec::default_for(SystemKind::ThreeBody);
        let q = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert!(matches!(hamiltonian(&tb, &h(&q, &[0.0; 6])), Err(MechError::SingularConfiguration(_))));
        assert!(matches!(lagrangian(&tb, &l(&[1.0; 9], &[0.0; 9])), Err(MechError::SingularConfiguration(_))));
    }

    #[test]
    fn three_body_lagrangian_reproduces_newtonian_accelerations() {
        let tb = SystemSpec::default_for(SystemKind::ThreeBody);
        let y = [
            0.9, -0.2, 0.1, -1.0, 0.3, -0.05, 0.1, -0.1, 0.0, 0.3, 0.4, -0.1, -0.2, 0.1, 0.05, 0.0, -0.5, 0.2,
        ];
        let mut g = Graph::new();
        let x = g.leaf();
        let lag = tb.lagrangian_node(&mut g, x, 9).unwrap();
        let acc = euler_lagrange(&mut g, lag, x, 9, 0.0);
        let xv = Array2::from_shape_vec((1, 18), y.to_vec()).unwrap();
        let got = g.eval_one(acc, &Bindings::new().with(x, &xv)).unwrap();
        let want = three_body_accelerations(&y[..9], &tb).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn eom_examples() {
        assert_eq!(hamiltonian_eom(&ms(), &h(&[1.0], &[0.0])).unwrap(), vec![0.0, -1.0]);
        assert_eq!(hamiltonian_eom(&ms(), &h(&[0.0], &[1.0])).unwrap(), vec![1.0, 0.0]);
        let pend = SystemSpec::default_for(SystemKind::Pendulum);
        assert_eq!(hamiltonian_eom(&pend, &h(&[0.0], &[0.0])).unwrap(), vec![0.0, 0.0]);
        assert_eq!(lagrangian_accel(&ms(), &l(&[1.0], &[0.0])).unwrap(), vec![-1.0]);
        assert_eq!(lagrangian_accel(&pend, &l(&[0.0], &[0.0])).unwrap(), vec![0.0]);
        let dp = SystemSpec::default_for(SystemKind::DoublePendulum);
        assert_eq!(lagrangian_accel(&dp, &l(&[0.0, 0.0], &[0.0, 0.0])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn three_body_examples() {
        let tb = SystemSpec::default_for(SystemKind::ThreeBody);
        let a = three_body_accelerations(&[0.0, 0.0, 1.0, 0.0, 2.0, 0.0], &tb).unwrap();
        assert!(close(&a, &[1.25, 0.0, 0.0, 0.0, -1.25, 0.0], 1e-15));

        let s3 = 3f64.sqrt();
        let tri = [1.0, 0.0, -0.5, s3 / 2.0, -0.5, -s3 / 2.0];
        let a = three_body_accelerations(&tri, &tb).unwrap();
        let mags: Vec<f64> = (0..3).map(|i| a[2 * i].hypot(a[2 * i + 1])).collect();
        for i in 0..3 {
            // antiparallel to the position vector, centroid at the origin
            let cross = a[2 * i] * tri[2 * i + 1] - a[2 * i + 1] * tri[2 * i];
            let dot = a[2 * i] * tri[2 * i] + a[2 * i + 1] * tri[2 * i + 1];
            assert!(cross.abs() < 1e-14 && dot < 0.0);
            assert!((mags[i] - mags[0]).abs() < 1e-14);
        }
        assert!(three_body_accelerations(&[0.0; 6], &tb).is_err());
    }

    #[test]
    fn three_body_accelerations_agree_with_hamiltonian_gradient() {
        let tb = SystemSpec::ThreeBody {
            gravitational_constant: 1.3,
            mass1: 0.7,
            mass2: 1.1,
            mass3: 2.0,
        };
        let q = [0.3, -0.2, 1.1, 0.4, -0.9, 0.8];
        let p = [0.1, 0.2, -0.3, 0.05, 0.4, -0.7];
        let f = hamiltonian_eom(&tb, &h(&q, &p)).unwrap();
        let a = three_body_accelerations(&q, &tb).unwrap();
        let m = [0.7, 1.1, 2.0];
        for k in 0..6 {
            assert!((f[6 + k] - m[k / 2] * a[k]).abs() < 1e-12);
            assert!((f[k] - p[k] / m[k / 2]).abs() < 1e-15);
        }
    }

    #[test]
    fn contact_examples() {
        let c = apply_contact(&h(&[0.0], &[-2.0]), 0.8);
        assert_eq!(c.as_slice(), &[0.0, 1.6]);
        let c = apply_contact(&h(&[-0.01], &[-2.0]), 0.8);
        assert_eq!(c.as_slice(), &[0.0, 1.6]);
        let before = h(&[0.0], &[-1.0]);
        let c = apply_contact(&before, 1.0);
        assert_eq!(c.as_slice(), &[0.0, 1.0]);
        let c = apply_contact(&h(&[0.5], &[-1.0]), 0.8);
        assert_eq!(c.as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn graph_and_closed_form_energies_agree() {
        let mut g = Graph::new();
        let x = g.leaf();
        for kind in [SystemKind::MassSpring, SystemKind::Pendulum, SystemKind::BouncingBall] {
            let sys = SystemSpec::default_for(kind);
            let node = sys.hamiltonian_node(&mut g, x, 1).unwrap();
            let s = [0.37, -1.2];
            let xv = Array2::from_shape_vec((1, 2), s.to_vec()).unwrap();
            let via_graph = g.eval_one(node, &Bindings::new().with(x, &xv)).unwrap()[[0, 0]];
            let direct = hamiltonian(&sys, &h(&s[..1], &s[1..])).unwrap();
            assert!((via_graph - direct).abs() < 1e-14, "{kind}");
        }
    }

    #[test]
    fn legendre_transform_round_trips() {
        for kind in [SystemKind::SpringPendulum, SystemKind::DoublePendulum, SystemKind::Pendulum] {
            let sys = SystemSpec::default_for(kind);
            let n = sys.dof(Convention::Lagrangian);
            let q: Vec<f64> = (0..n).map(|i| 1.1 - 0.4 * i as f64).collect();
            let v: Vec<f64> = (0..n).map(|i| 0.3 + 0.5 * i as f64).collect();
            let s = l(&q, &v);
            let back = to_lagrangian(&sys, &to_hamiltonian(&sys, &s).unwrap()).unwrap();
            assert!(close(back.as_slice(), s.as_slice(), 1e-13), "{kind}");
            // H = p·q̇ - L
            let sh = to_hamiltonian(&sys, &s).unwrap();
            let pv: f64 = sh.second().iter().zip(&v).map(|(a, b)| a * b).sum();
            let e = hamiltonian(&sys, &sh).unwrap();
            assert!((e - (pv - lagrangian(&sys, &s).unwrap())).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SystemKind::ALL {
            assert_eq!(k.name().parse::<SystemKind>().unwrap(), k);
        }
        assert!("triple-pendulum".parse::<SystemKind>().is_err());
    }

    #[test]
    fn validation_rejects_bad_constants() {
        assert!(SystemSpec::MassSpring { mass: 0.0, stiffness: 1.0 }.validate().is_err());
        assert!(SystemSpec::BouncingBall {
            mass: 1.0,
            gravity: 9.8,
            restitution: 1.2
        }
        .validate()
        .is_err());
        for k in SystemKind::ALL {
            SystemSpec::default_for(k).validate().unwrap();
        }
    }
}
