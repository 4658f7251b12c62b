//! Learned-dynamics models: a network energy and the flow it induces.
//!
//! * HNN: `H_θ(q, p)`, flow `(∂H/∂p, -∂H/∂q)`.
//! * LNN: `L_θ(q, q̇)`, accelerations from the Euler-Lagrange equations.
//! * SRNN: `H = K_θ(p) + V_θ(q)` unrolled with leapfrog.
//!
//! Besides perceptrons, an energy can be an analytic system energy; models
//! built that way reproduce the true dynamics and serve as an end-to-end
//! oracle for the pipeline.

mod loss;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use loss::{hnn_loss, lnn_loss, srnn_loss, srnn_loss_batch, srnn_windows, LossGraph};

use crate::datasets::{rng_for, ExperimentConfig, ModelKind, INIT_STREAM};
use crate::diff_engine::{euler_lagrange, symplectic_field, Bindings, Graph, MlpGraph, MlpParams, MlpSpec, NodeId};
use crate::error::{MechError, Result};
use crate::integrators::{integrate_with_contact, leapfrog_with, rk45_integrate, uniform_step, IntegratorConfig, Trajectory};
use crate::systems::{contact_in_place, Convention, PhaseState, SystemSpec};

/// Which energy of a system an [`AnalyticEnergy`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyPart {
    /// `H(q, p)`
    Hamiltonian,
    /// `L(q, q̇)`
    Lagrangian,
    /// `K(p)`
    Kinetic,
    /// `V(q)`
    Potential,
}

/// A system's true energy in place of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticEnergy {
    pub system: SystemSpec,
    pub part: EnergyPart,
    pub dof: usize,
}

impl AnalyticEnergy {
    pub fn input_dim(&self) -> usize {
        match self.part {
            EnergyPart::Hamiltonian | EnergyPart::Lagrangian => 2 * self.dof,
            EnergyPart::Kinetic | EnergyPart::Potential => self.dof,
        }
    }

    fn node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.part {
            EnergyPart::Hamiltonian => self.system.hamiltonian_node(g, x, self.dof),
            EnergyPart::Lagrangian => self.system.lagrangian_node(g, x, self.dof),
            EnergyPart::Kinetic => self.system.kinetic_node(g, x, self.dof),
            EnergyPart::Potential => self.system.potential_node(g, x, self.dof),
        }
    }
}

/// A scalar energy of the model input: a perceptron or an analytic energy.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyNet {
    Mlp(MlpParams),
    Analytic(AnalyticEnergy),
}

impl EnergyNet {
    pub fn input_dim(&self) -> usize {
        match self {
            EnergyNet::Mlp(p) => p.spec().input_dim(),
            EnergyNet::Analytic(a) => a.input_dim(),
        }
    }

    pub fn mlp(&self) -> Option<&MlpParams> {
        match self {
            EnergyNet::Mlp(p) => Some(p),
            EnergyNet::Analytic(_) => None,
        }
    }

    /// Trainable parameter count (zero for analytic energies).
    pub fn n_params(&self) -> usize {
        self.mlp().map_or(0, |p| p.spec().n_params())
    }

    pub fn is_finite(&self) -> bool {
        self.mlp().is_none_or(MlpParams::is_finite)
    }

    fn row(&self, x: &[f64]) -> Result<Array2<f64>> {
        if x.len() != self.input_dim() {
            return Err(MechError::dims("energy input", self.input_dim(), x.len()));
        }
        Ok(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector"))
    }

    /// Energy at one input.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let xv = self.row(x)?;
        let mut g = Graph::new();
        let xn = g.leaf();
        let nodes = NetNodes::declare(&mut g, self);
        let out = nodes.apply(&mut g, xn)?;
        let mut b = Bindings::new().with(xn, &xv);
        nodes.bind(self, &mut b);
        Ok(g.eval_one(out, &b)?[[0, 0]])
    }

    /// Gradient of the energy with respect to its input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xv = self.row(x)?;
        let field = CompiledField::new(self, xv.ncols(), |g, x, e| Ok(g.grad(e, &[x])[0]))?;
        field.eval(&xv.into_raw_vec_and_offset().0)
    }
}

/// Graph-side handle of an [`EnergyNet`].
#[derive(Clone, Debug)]
pub(crate) enum NetNodes {
    Mlp(MlpGraph),
    Analytic(AnalyticEnergy),
}

impl NetNodes {
    pub(crate) fn declare(g: &mut Graph, net: &EnergyNet) -> Self {
        match net {
            EnergyNet::Mlp(p) => NetNodes::Mlp(MlpGraph::declare(g, p.spec())),
            EnergyNet::Analytic(a) => NetNodes::Analytic(*a),
        }
    }

    /// Energy of each row of `x`, `batch x 1`.
    pub(crate) fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            NetNodes::Mlp(m) => Ok(m.apply(g, x)),
            NetNodes::Analytic(a) => a.node(g, x),
        }
    }

    pub(crate) fn leaves(&self) -> Vec<NodeId> {
        match self {
            NetNodes::Mlp(m) => m.leaves(),
            NetNodes::Analytic(_) => Vec::new(),
        }
    }

    pub(crate) fn bind<'a>(&self, net: &'a EnergyNet, b: &mut Bindings<'a>) {
        if let (NetNodes::Mlp(m), EnergyNet::Mlp(p)) = (self, net) {
            m.bind(p, b);
        }
    }

    pub(crate) fn matches(&self, net: &EnergyNet) -> bool {
        match (self, net) {
            (NetNodes::Mlp(m), EnergyNet::Mlp(p)) => m.leaves().len() == 2 * p.spec().n_layers(),
            (NetNodes::Analytic(a), EnergyNet::Analytic(b)) => a == b,
            _ => false,
        }
    }
}

/// A vector field of one energy, compiled once and evaluated on many rows.
pub struct CompiledField<'m> {
    graph: Graph,
    x: NodeId,
    out: NodeId,
    nodes: NetNodes,
    net: &'m EnergyNet,
    width: usize,
}

impl<'m> CompiledField<'m> {
    /// `build(g, x, energy)` turns the energy node into the field node.
    fn new(net: &'m EnergyNet, width: usize, build: impl FnOnce(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> Result<Self> {
        let mut graph = Graph::new();
        let x = graph.leaf();
        let nodes = NetNodes::declare(&mut graph, net);
        let e = nodes.apply(&mut graph, x)?;
        let out = build(&mut graph, x, e)?;
        Ok(Self {
            graph,
            x,
            out,
            nodes,
            net,
            width,
        })
    }

    /// Field at every row of `x`.
    pub fn eval_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.width {
            return Err(MechError::dims("field input", self.width, x.ncols()));
        }
        let mut b = Bindings::new().with(self.x, x);
        self.nodes.bind(self.net, &mut b);
        self.graph.eval_one(self.out, &b)
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.width {
            return Err(MechError::dims("field input", self.width, y.len()));
        }
        let xv = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row vector");
        let out: Vec<f64> = self.eval_rows(&xv)?.into_iter().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MechError::NonFinite("model vector field".into()));
        }
        Ok(out)
    }
}

fn even_input(net: &EnergyNet, context: &'static str) -> Result<usize> {
    let d = net.input_dim();
    if d == 0 || !d.is_multiple_of(2) {
        return Err(MechError::dims(context, "positive even", d));
    }
    Ok(d / 2)
}

/// Hamiltonian neural network.
#[derive(Clone, Debug, PartialEq)]
pub struct HnnModel {
    pub net: EnergyNet,
}

impl HnnModel {
    pub fn new(net: EnergyNet) -> Result<Self> {
        even_input(&net, "HNN input")?;
        Ok(Self { net })
    }

    /// The true `H` of `system`.
    pub fn exact(system: &SystemSpec, dof: usize) -> Result<Self> {
        Self::new(EnergyNet::Analytic(AnalyticEnergy {
            system: *system,
            part: EnergyPart::Hamiltonian,
            dof,
        }))
    }

    pub fn dof(&self) -> usize {
        self.net.input_dim() / 2
    }

    /// Compiled `(∂H/∂p, -∂H/∂q)`.
    pub fn field(&self) -> Result<CompiledField<'_>> {
        let dof = self.dof();
        CompiledField::new(&self.net, 2 * dof, |g, x, h| Ok(symplectic_field(g, h, x, dof)))
    }
}

/// `(q̇, ṗ) = (∂H_θ/∂p, -∂H_θ/∂q)` at `s`.
pub fn hnn_time_derivative(m: &HnnModel, s: &PhaseState) -> Result<Vec<f64>> {
    if s.dof() != m.dof() {
        return Err(MechError::dims("HNN state", 2 * m.dof(), s.as_slice().len()));
    }
    m.field()?.eval(s.as_slice())
}

/// Lagrangian neural network.
#[derive(Clone, Debug, PartialEq)]
pub struct LnnModel {
    pub net: EnergyNet,
    /// Ridge added to the velocity Hessian before solving.
    pub regularization: f64,
}

impl LnnModel {
    pub fn new(net: EnergyNet, regularization: f64) -> Result<Self> {
        even_input(&net, "LNN input")?;
        if !(regularization >= 0.0) {
            return Err(MechError::InvalidConfig(format!("regularization must be nonnegative, got {regularization}")));
        }
        Ok(Self { net, regularization })
    }

    /// The true `L` of `system`, solved without regularization.
    pub fn exact(system: &SystemSpec, dof: usize) -> Result<Self> {
        Self::new(
            EnergyNet::Analytic(AnalyticEnergy {
                system: *system,
                part: EnergyPart::Lagrangian,
                dof,
            }),
            0.0,
        )
    }

    pub fn dof(&self) -> usize {
        self.net.input_dim() / 2
    }

    /// Compiled `q̈(q, q̇)`.
    pub fn field(&self) -> Result<CompiledField<'_>> {
        let (dof, reg) = (self.dof(), self.regularization);
        CompiledField::new(&self.net, 2 * dof, |g, x, l| Ok(euler_lagrange(g, l, x, dof, reg)))
    }
}

/// `q̈` from the Euler-Lagrange equations of `L_θ` at `s = (q, q̇)`.
///
/// Fails with [`MechError::Degenerate`] when the regularized velocity
/// Hessian is singular or its condition number exceeds `1e12`.
pub fn lnn_acceleration(m: &LnnModel, s: &PhaseState) -> Result<Vec<f64>> {
    if s.dof() != m.dof() {
        return Err(MechError::dims("LNN state", 2 * m.dof(), s.as_slice().len()));
    }
    m.field()?.eval(s.as_slice())
}

/// Separable Hamiltonian `K_θ(p) + V_θ(q)` integrated with leapfrog.
#[derive(Clone, Debug, PartialEq)]
pub struct SrnnModel {
    pub k_net: EnergyNet,
    pub v_net: EnergyNet,
}

impl SrnnModel {
    pub fn new(k_net: EnergyNet, v_net: EnergyNet) -> Result<Self> {
        if k_net.input_dim() != v_net.input_dim() || k_net.input_dim() == 0 {
            return Err(MechError::dims("SRNN K and V inputs", k_net.input_dim(), v_net.input_dim()));
        }
        Ok(Self { k_net, v_net })
    }

    /// The true `K` and `V` of a separable `system`.
    pub fn exact(system: &SystemSpec, dof: usize) -> Result<Self> {
        if !system.kind().is_separable() {
            return Err(MechError::Unsupported(format!("{} is not separable", system.kind())));
        }
        let part = |part| EnergyNet::Analytic(AnalyticEnergy { system: *system, part, dof });
        Self::new(part(EnergyPart::Kinetic), part(EnergyPart::Potential))
    }

    pub fn dof(&self) -> usize {
        self.k_net.input_dim()
    }

    /// Compiled `K'(p)` and `V'(q)`.
    pub fn gradients(&self) -> Result<(CompiledField<'_>, CompiledField<'_>)> {
        let n = self.dof();
        let grad = |g: &mut Graph, x, e| Ok(g.grad(e, &[x])[0]);
        Ok((CompiledField::new(&self.k_net, n, grad)?, CompiledField::new(&self.v_net, n, grad)?))
    }
}

/// Leapfrog rollout of the learned separable Hamiltonian from `z0 = (q, p)`.
pub fn srnn_rollout(m: &SrnnModel, z0: &PhaseState, dt: f64, n_steps: usize) -> Result<Trajectory> {
    srnn_rollout_from(m, z0.as_slice(), 0.0, dt, n_steps, None)
}

/// [`srnn_rollout`] starting at time `t0`, optionally applying the
/// bouncing-ball contact rule after every step.
pub fn srnn_rollout_from(m: &SrnnModel, z0: &[f64], t0: f64, dt: f64, n_steps: usize, restitution: Option<f64>) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(MechError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    if z0.len() != 2 * m.dof() {
        return Err(MechError::dims("SRNN state", 2 * m.dof(), z0.len()));
    }
    let (dk, dv) = m.gradients()?;
    leapfrog_with(
        |q| dv.eval(q),
        |p| dk.eval(p),
        z0,
        t0,
        dt,
        n_steps,
        |z| {
            if let Some(rho) = restitution {
                contact_in_place(z, rho);
            }
        },
    )
}

/// RK45 step budget of a learned-model rollout; a badly trained field can
/// otherwise stiffen into millions of tiny steps.
pub const MODEL_MAX_STEPS: usize = 100_000;

/// Output-layer weight gain for a freshly initialised LNN. With plain Glorot
/// scaling the velocity Hessian of L starts tiny, the solved accelerations are
/// huge, and training on the double pendulum never leaves the first plateau.
pub const LNN_OUTPUT_GAIN: f64 = 10.0;

/// Integration settings of a model rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    /// RK45 tolerances of HNN and LNN rollouts.
    pub integrator: IntegratorConfig,
    /// Bouncing-ball contact restitution; switches HNN and LNN rollouts to
    /// forward Euler on the sample grid.
    pub restitution: Option<f64>,
}

impl RolloutConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            integrator: IntegratorConfig {
                max_steps: MODEL_MAX_STEPS,
                ..cfg.integrator()
            },
            restitution: cfg.rollout_restitution(),
        }
    }
}

/// Predicted trajectory of an HNN or LNN on `sample_times`: RK45 over the
/// learned field, or Euler steps with the contact rule when a restitution
/// is configured.
pub fn rollout_ode_model(model: &Model, s0: &PhaseState, sample_times: &[f64], cfg: &RolloutConfig) -> Result<Trajectory> {
    type Field<'a> = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>;
    let field: Field<'_> = match model {
        Model::Hnn(m) => {
            expect_convention(s0, Convention::Hamiltonian)?;
            let f = m.field()?;
            Box::new(move |y| f.eval(y))
        }
        Model::Lnn(m) => {
            expect_convention(s0, Convention::Lagrangian)?;
            let f = m.field()?;
            let n = m.dof();
            Box::new(move |y| {
                let acc = f.eval(y)?;
                let mut out = y[n..].to_vec();
                out.extend(acc);
                Ok(out)
            })
        }
        Model::Srnn(_) => return Err(MechError::Unsupported("SRNN models roll out with leapfrog".into())),
    };
    if s0.as_slice().len() != 2 * model.dof() {
        return Err(MechError::dims("initial state", 2 * model.dof(), s0.as_slice().len()));
    }
    match cfg.restitution {
        Some(rho) => {
            let step = uniform_step(sample_times, 1e-9)?;
            integrate_with_contact(|_, y| field(y), s0.as_slice(), sample_times[0], step, sample_times.len() - 1, rho)
        }
        None => rk45_integrate(|_, y| field(y), s0.as_slice(), sample_times, &cfg.integrator),
    }
}

fn expect_convention(s: &PhaseState, c: Convention) -> Result<()> {
    if s.convention() != c {
        return Err(MechError::InvalidConfig(format!("expected a {c:?} state, got {:?}", s.convention())));
    }
    Ok(())
}

/// Any of the three models.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Hnn(HnnModel),
    Lnn(LnnModel),
    Srnn(SrnnModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Hnn(_) => ModelKind::Hnn,
            Model::Lnn(_) => ModelKind::Lnn,
            Model::Srnn(_) => ModelKind::Srnn,
        }
    }

    pub fn dof(&self) -> usize {
        match self {
            Model::Hnn(m) => m.dof(),
            Model::Lnn(m) => m.dof(),
            Model::Srnn(m) => m.dof(),
        }
    }

    /// Freshly initialised perceptrons for `cfg`: `depth` affine layers of
    /// `width` units, Glorot-uniform weights drawn from the init streams of
    /// `cfg.seed`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let dof = cfg.dof();
        let net = |input: usize, k: u64| -> Result<EnergyNet> {
            let spec = MlpSpec::with_depth(input, cfg.width, cfg.depth, cfg.activation)?;
            Ok(EnergyNet::Mlp(MlpParams::init(spec, &mut rng_for(cfg.seed, INIT_STREAM + k))))
        };
        Ok(match cfg.model {
            ModelKind::Hnn => Model::Hnn(HnnModel::new(net(2 * dof, 0)?)?),
            ModelKind::Lnn => {
                let mut l = net(2 * dof, 0)?;
                if let EnergyNet::Mlp(p) = &mut l {
                    if let Some(last) = p.layers_mut().last_mut() {
                        last.weight *= LNN_OUTPUT_GAIN;
                    }
                }
                Model::Lnn(LnnModel::new(l, cfg.lnn_regularization)?)
            }
            ModelKind::Srnn => Model::Srnn(SrnnModel::new(net(dof, 0)?, net(dof, 1)?)?),
        })
    }

    /// The model whose energy is the true energy of `cfg.system`.
    pub fn exact(cfg: &ExperimentConfig) -> Result<Self> {
        let dof = cfg.dof();
        Ok(match cfg.model {
            ModelKind::Hnn => Model::Hnn(HnnModel::exact(&cfg.system, dof)?),
            ModelKind::Lnn => Model::Lnn(LnnModel::exact(&cfg.system, dof)?),
            ModelKind::Srnn => Model::Srnn(SrnnModel::exact(&cfg.system, dof)?),
        })
    }

    /// Energies with their roles: `h`, `l`, or `k` and `v`.
    pub fn nets(&self) -> Vec<(&'static str, &EnergyNet)> {
        match self {
            Model::Hnn(m) => vec![("h", &m.net)],
            Model::Lnn(m) => vec![("l", &m.net)],
            Model::Srnn(m) => vec![("k", &m.k_net), ("v", &m.v_net)],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut EnergyNet> {
        match self {
            Model::Hnn(m) => vec![&mut m.net],
            Model::Lnn(m) => vec![&mut m.net],
            Model::Srnn(m) => vec![&mut m.k_net, &mut m.v_net],
        }
    }

    /// Trainable arrays of every perceptron, net by net in layer order.
    pub fn param_arrays(&self) -> Vec<&Array2<f64>> {
        self.nets().into_iter().filter_map(|(_, n)| n.mlp()).flat_map(MlpParams::arrays).collect()
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.nets_mut()
            .into_iter()
            .filter_map(|n| match n {
                EnergyNet::Mlp(p) => Some(p),
                EnergyNet::Analytic(_) => None,
            })
            .flat_map(MlpParams::arrays_mut)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.n_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.nets().iter().all(|(_, n)| n.is_finite())
    }

    /// Predicted trajectory from `s0` on the uniform grid `times`. SRNN
    /// models step leapfrog at the grid spacing; the others go through
    /// [`rollout_ode_model`].
    pub fn rollout(&self, s0: &PhaseState, times: &[f64], cfg: &RolloutConfig) -> Result<Trajectory> {
        match self {
            Model::Srnn(m) => {
                expect_convention(s0, Convention::Hamiltonian)?;
                let dt = uniform_step(times, 1e-9)?;
                srnn_rollout_from(m, s0.as_slice(), times[0], dt, times.len() - 1, cfg.restitution)
            }
            _ => rollout_ode_model(self, s0, times, cfg),
        }
    }
}
