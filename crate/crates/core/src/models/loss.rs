//! Training losses as reusable graphs with precomputed parameter gradients.

use ndarray::{Array2, ArrayView1};

use super::{HnnModel, LnnModel, Model, NetNodes, SrnnModel};
use crate::datasets::ModelKind;
use crate::diff_engine::{euler_lagrange, symplectic_field, Bindings, Graph, NodeId};
use crate::error::{MechError, Result};
use crate::integrators::{uniform_step, Trajectory};

/// A model loss compiled once: inputs `x`, targets `y`, and a `1/B` weight
/// are leaves; the gradient with respect to every trainable array is
/// appended at construction.
///
/// * HNN: `x` = states, `y` = `(q̇, ṗ)`; loss `1/B Σ ‖f_θ(x) - y‖²`.
/// * LNN: `x` = `(q, q̇)`, `y` = `q̈`; loss `1/B Σ ‖q̈_θ(x) - y‖²`.
/// * SRNN: `x` = window starts `z₀`, `y` = `z₁ … z_W` side by side; loss
///   `1/B Σ_b Σ_i ‖z_i - ẑ_i‖²` over a `W`-step leapfrog rollout.
pub struct LossGraph {
    graph: Graph,
    kind: ModelKind,
    x: NodeId,
    y: NodeId,
    w: NodeId,
    nets: Vec<NetNodes>,
    loss: NodeId,
    grads: Vec<NodeId>,
    x_width: usize,
    y_width: usize,
}

impl LossGraph {
    #[allow(clippy::too_many_arguments)]
    fn finish(mut graph: Graph, kind: ModelKind, x: NodeId, y: NodeId, w: NodeId, nets: Vec<NetNodes>, total: NodeId, widths: (usize, usize)) -> Self {
        let loss = graph.mul(w, total);
        let leaves: Vec<NodeId> = nets.iter().flat_map(NetNodes::leaves).collect();
        let grads = if leaves.is_empty() { Vec::new() } else { graph.grad(loss, &leaves) };
        Self {
            graph,
            kind,
            x,
            y,
            w,
            nets,
            loss,
            grads,
            x_width: widths.0,
            y_width: widths.1,
        }
    }

    pub fn hnn(m: &HnnModel) -> Result<Self> {
        let dof = m.dof();
        let mut g = Graph::new();
        let (x, y, w) = (g.leaf(), g.leaf(), g.leaf());
        let net = NetNodes::declare(&mut g, &m.net);
        let h = net.apply(&mut g, x)?;
        let f = symplectic_field(&mut g, h, x, dof);
        let d = g.sub(f, y);
        let d2 = g.square(d);
        let total = g.sum_all(d2);
        Ok(Self::finish(g, ModelKind::Hnn, x, y, w, vec![net], total, (2 * dof, 2 * dof)))
    }

    pub fn lnn(m: &LnnModel) -> Result<Self> {
        let dof = m.dof();
        let mut g = Graph::new();
        let (x, y, w) = (g.leaf(), g.leaf(), g.leaf());
        let net = NetNodes::declare(&mut g, &m.net);
        let l = net.apply(&mut g, x)?;
        let acc = euler_lagrange(&mut g, l, x, dof, m.regularization);
        let d = g.sub(acc, y);
        let d2 = g.square(d);
        let total = g.sum_all(d2);
        Ok(Self::finish(g, ModelKind::Lnn, x, y, w, vec![net], total, (2 * dof, dof)))
    }

    /// `steps` leapfrog steps of size `dt`; with a restitution the contact
    /// rule is applied after every step, as a branch-free select.
    pub fn srnn(m: &SrnnModel, steps: usize, dt: f64, restitution: Option<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(MechError::InvalidConfig("an SRNN loss needs at least one step".into()));
        }
        if !(dt > 0.0) {
            return Err(MechError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        let n = m.dof();
        let mut g = Graph::new();
        let (x, y, w) = (g.leaf(), g.leaf(), g.leaf());
        let k = NetNodes::declare(&mut g, &m.k_net);
        let v = NetNodes::declare(&mut g, &m.v_net);
        let grad_of = |g: &mut Graph, net: &NetNodes, a: NodeId| -> Result<NodeId> {
            let e = net.apply(g, a)?;
            Ok(g.grad(e, &[a])[0])
        };
        let mut q = g.slice_cols(x, 0, n);
        let mut p = g.slice_cols(x, n, n);
        let mut dv = grad_of(&mut g, &v, q)?;
        let mut total = None;
        for i in 0..steps {
            let kick = g.scale(dv, 0.5 * dt);
            p = g.sub(p, kick);
            let dk = grad_of(&mut g, &k, p)?;
            let drift = g.scale(dk, dt);
            q = g.add(q, drift);
            dv = grad_of(&mut g, &v, q)?;
            let kick = g.scale(dv, 0.5 * dt);
            p = g.sub(p, kick);
            if let Some(rho) = restitution {
                let below = g.neg(q);
                let below = g.step(below);
                let rising = g.step(p);
                let one = g.scalar(1.0);
                let falling = g.sub(one, rising);
                let hit = g.mul(below, falling);
                let ground = g.zeros_like(q);
                q = g.select(hit, ground, q);
                let bounced = g.scale(p, -rho);
                p = g.select(hit, bounced, p);
                dv = grad_of(&mut g, &v, q)?;
            }
            let yq = g.slice_cols(y, 2 * n * i, n);
            let yp = g.slice_cols(y, 2 * n * i + n, n);
            let eq = g.sub(q, yq);
            let ep = g.sub(p, yp);
            let eq = g.square(eq);
            let ep = g.square(ep);
            let s = g.add(eq, ep);
            let s = g.sum_all(s);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s),
            });
        }
        let total = total.expect("at least one step");
        Ok(Self::finish(g, ModelKind::Srnn, x, y, w, vec![k, v], total, (2 * n, 2 * n * steps)))
    }

    /// The loss of `model` for experiment training: SRNN windows use
    /// `steps` steps of `dt`.
    pub fn for_model(model: &Model, steps: usize, dt: f64, restitution: Option<f64>) -> Result<Self> {
        match model {
            Model::Hnn(m) => Self::hnn(m),
            Model::Lnn(m) => Self::lnn(m),
            Model::Srnn(m) => Self::srnn(m, steps, dt, restitution),
        }
    }

    pub fn input_width(&self) -> usize {
        self.x_width
    }

    pub fn target_width(&self) -> usize {
        self.y_width
    }

    fn check(&self, model: &Model, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        if model.kind() != self.kind {
            return Err(MechError::InvalidConfig(format!("{} loss applied to a {} model", self.kind, model.kind())));
        }
        let nets = model.nets();
        if nets.len() != self.nets.len() || !nets.iter().zip(&self.nets).all(|((_, n), g)| g.matches(n)) {
            return Err(MechError::InvalidConfig("model does not match the loss graph".into()));
        }
        if x.nrows() == 0 {
            return Err(MechError::EmptyBatch);
        }
        if x.nrows() != y.nrows() {
            return Err(MechError::dims("batch targets", x.nrows(), y.nrows()));
        }
        if x.ncols() != self.x_width {
            return Err(MechError::dims("batch inputs", self.x_width, x.ncols()));
        }
        if y.ncols() != self.y_width {
            return Err(MechError::dims("batch targets", self.y_width, y.ncols()));
        }
        Ok(())
    }

    fn bindings<'a>(&self, model: &'a Model, x: &'a Array2<f64>, y: &'a Array2<f64>, w: &'a Array2<f64>) -> Bindings<'a> {
        let mut b = Bindings::new().with(self.x, x).with(self.y, y).with(self.w, w);
        for ((_, net), nodes) in model.nets().into_iter().zip(&self.nets) {
            nodes.bind(net, &mut b);
        }
        b
    }

    fn weight(x: &Array2<f64>) -> Array2<f64> {
        Array2::from_elem((1, 1), 1.0 / x.nrows() as f64)
    }

    /// Mean loss over the rows of the batch.
    pub fn value(&self, model: &Model, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        self.check(model, x, y)?;
        let w = Self::weight(x);
        let v = self.graph.eval_one(self.loss, &self.bindings(model, x, y, &w))?[[0, 0]];
        if !v.is_finite() {
            return Err(MechError::NonFinite("loss".into()));
        }
        Ok(v)
    }

    /// Loss and its gradient, one array per [`Model::param_arrays`] entry.
    pub fn value_and_gradient(&self, model: &Model, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Vec<Array2<f64>>)> {
        self.check(model, x, y)?;
        let w = Self::weight(x);
        let mut outputs = vec![self.loss];
        outputs.extend(&self.grads);
        let mut values = self.graph.eval(&outputs, &self.bindings(model, x, y, &w))?;
        let v = values.remove(0)[[0, 0]];
        if !v.is_finite() {
            return Err(MechError::NonFinite("loss".into()));
        }
        if values.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
            return Err(MechError::NonFinite("parameter gradient".into()));
        }
        Ok((v, values))
    }
}

/// HNN loss of a batch of states and `(q̇, ṗ)` labels.
pub fn hnn_loss(m: &HnnModel, inputs: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    LossGraph::hnn(m)?.value(&Model::Hnn(m.clone()), inputs, labels)
}

/// LNN loss of a batch of `(q, q̇)` states and `q̈` labels.
pub fn lnn_loss(m: &LnnModel, inputs: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    LossGraph::lnn(m)?.value(&Model::Lnn(m.clone()), inputs, labels)
}

/// Packs windows `(trajectory, start)` of `steps` steps into SRNN loss
/// inputs and targets.
pub fn srnn_windows(windows: &[(&Trajectory, usize)], steps: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let Some((first, _)) = windows.first() else {
        return Err(MechError::EmptyBatch);
    };
    let d = first.dim();
    let mut x = Array2::zeros((windows.len(), d));
    let mut y = Array2::zeros((windows.len(), d * steps));
    for (r, &(t, start)) in windows.iter().enumerate() {
        if t.dim() != d {
            return Err(MechError::dims("window state", d, t.dim()));
        }
        if start + steps >= t.len() {
            return Err(MechError::IndexOutOfRange {
                index: start + steps,
                dim: t.len(),
            });
        }
        x.row_mut(r).assign(&ArrayView1::from(t.state(start)));
        for i in 0..steps {
            y.slice_mut(ndarray::s![r, i * d..(i + 1) * d])
                .assign(&ArrayView1::from(t.state(start + 1 + i)));
        }
    }
    Ok((x, y))
}

/// SRNN loss of whole observed trajectories: a rollout from each `z₀`
/// compared at every later grid point, summed over time and averaged over
/// trajectories.
pub fn srnn_loss_batch(m: &SrnnModel, observed: &[Trajectory]) -> Result<f64> {
    let Some(first) = observed.first() else {
        return Err(MechError::EmptyBatch);
    };
    let dt = uniform_step(first.times(), 1e-9)?;
    for t in observed {
        if t.len() != first.len() {
            return Err(MechError::dims("observed trajectory length", first.len(), t.len()));
        }
        let step = uniform_step(t.times(), 1e-9)?;
        if (step - dt).abs() > 1e-9 * dt.abs() {
            return Err(MechError::NonUniformGrid(format!("steps {dt} and {step} differ")));
        }
    }
    let steps = first.len() - 1;
    let windows: Vec<(&Trajectory, usize)> = observed.iter().map(|t| (t, 0)).collect();
    let (x, y) = srnn_windows(&windows, steps)?;
    LossGraph::srnn(m, steps, dt, None)?.value(&Model::Srnn(m.clone()), &x, &y)
}

pub fn srnn_loss(m: &SrnnModel, observed: &Trajectory) -> Result<f64> {
    srnn_loss_batch(m, std::slice::from_ref(observed))
}
