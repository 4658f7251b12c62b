use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bindings, Graph, NodeId};
use crate::error::{MechError, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

/// Layer sizes of a scalar-output perceptron, input first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(MechError::InvalidConfig(format!("an MLP needs at least two layer sizes, got {layer_sizes:?}")));
        }
        if layer_sizes.contains(&0) {
            return Err(MechError::InvalidConfig(format!("layer sizes must be positive: {layer_sizes:?}")));
        }
        if *layer_sizes.last().expect("nonempty") != 1 {
            return Err(MechError::InvalidConfig(format!("MLP output must be scalar: {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes, activation })
    }

    /// `depth` affine layers, so `depth - 1` hidden layers of `width` units.
    pub fn with_depth(input: usize, width: usize, depth: usize, activation: Activation) -> Result<Self> {
        if depth == 0 {
            return Err(MechError::InvalidConfig("network depth must be positive".into()));
        }
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, depth - 1));
        sizes.push(1);
        Self::new(sizes, activation)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer: `weight` is `fan_in x fan_out`, `bias` is `1 x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Weights and biases of an [`MlpSpec`] network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array2::zeros((1, w[1])),
            })
            .collect();
        Self { spec, layers }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let (fan_in, fan_out) = layer.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        params
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != spec.n_layers() {
            return Err(MechError::dims("MLP layer count", spec.n_layers(), layers.len()));
        }
        for (layer, w) in layers.iter().zip(spec.layer_sizes.windows(2)) {
            if layer.weight.dim() != (w[0], w[1]) {
                return Err(MechError::dims(
                    "MLP weight shape",
                    format!("{:?}", (w[0], w[1])),
                    format!("{:?}", layer.weight.dim()),
                ));
            }
            if layer.bias.dim() != (1, w[1]) {
                return Err(MechError::dims("MLP bias shape", format!("{:?}", (1, w[1])), format!("{:?}", layer.bias.dim())));
            }
        }
        Ok(Self { spec, layers })
    }

    /// Rebuilds parameters from arrays ordered as [`MlpParams::arrays`].
    pub fn from_arrays(spec: MlpSpec, arrays: Vec<Array2<f64>>) -> Result<Self> {
        if arrays.len() != 2 * spec.n_layers() {
            return Err(MechError::dims("MLP parameter arrays", 2 * spec.n_layers(), arrays.len()));
        }
        let mut it = arrays.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        Self::from_layers(spec, layers)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Parameter arrays in layer order: `W0, b0, W1, b1, ...`.
    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Leaf nodes standing for the parameters of one network inside a graph.
#[derive(Clone, Debug)]
pub struct MlpGraph {
    spec: MlpSpec,
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl MlpGraph {
    pub fn declare(g: &mut Graph, spec: &MlpSpec) -> Self {
        let n = spec.n_layers();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(g.leaf());
            biases.push(g.leaf());
        }
        Self {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    /// Appends the forward pass on a `batch x input_dim` node; the result is
    /// `batch x 1`.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = g.matmul(h, w);
            let z = g.add(z, b);
            h = if i == last {
                z
            } else {
                match self.spec.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Softplus => g.softplus(z),
                }
            };
        }
        h
    }

    /// Parameter leaves in [`MlpParams::arrays`] order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    pub fn bind<'a>(&self, params: &'a MlpParams, bindings: &mut Bindings<'a>) {
        for (leaf, value) in self.leaves().into_iter().zip(params.arrays()) {
            bindings.bind(leaf, value);
        }
    }
}

fn check_input(params: &MlpParams, x: &[f64]) -> Result<Array2<f64>> {
    let d = params.spec.input_dim();
    if x.len() != d {
        return Err(MechError::dims("MLP input", d, x.len()));
    }
    Ok(Array2::from_shape_vec((1, d), x.to_vec()).expect("row vector"))
}

/// Scalar network output at `x`.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    let xv = check_input(params, x)?;
    let mut g = Graph::new();
    let xn = g.leaf();
    let net = MlpGraph::declare(&mut g, &params.spec);
    let out = net.apply(&mut g, xn);
    let mut b = Bindings::new().with(xn, &xv);
    net.bind(params, &mut b);
    Ok(g.eval_one(out, &b)?[[0, 0]])
}

/// Gradient of the network output with respect to its input.
pub fn input_gradient(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let xv = check_input(params, x)?;
    let mut g = Graph::new();
    let xn = g.leaf();
    let net = MlpGraph::declare(&mut g, &params.spec);
    let out = net.apply(&mut g, xn);
    let grad = g.grad(out, &[xn])[0];
    let mut b = Bindings::new().with(xn, &xv);
    net.bind(params, &mut b);
    Ok(g.eval_one(grad, &b)?.into_iter().collect())
}

/// Block `[rows x cols]` of the input Hessian of the network output.
pub fn input_hessian_block(params: &MlpParams, x: &[f64], rows: &[usize], cols: &[usize]) -> Result<Array2<f64>> {
    let xv = check_input(params, x)?;
    let d = xv.ncols();
    for &i in rows.iter().chain(cols) {
        if i >= d {
            return Err(MechError::IndexOutOfRange { index: i, dim: d });
        }
    }
    let mut g = Graph::new();
    let xn = g.leaf();
    let net = MlpGraph::declare(&mut g, &params.spec);
    let out = net.apply(&mut g, xn);
    let grad = g.grad(out, &[xn])[0];
    let hess_rows: Vec<NodeId> = rows
        .iter()
        .map(|&r| {
            let gr = g.slice_cols(grad, r, 1);
            g.grad(gr, &[xn])[0]
        })
        .collect();
    let mut b = Bindings::new().with(xn, &xv);
    net.bind(params, &mut b);
    let values = g.eval(&hess_rows, &b)?;
    let mut block = Array2::zeros((rows.len(), cols.len()));
    for (i, row) in values.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            block[[i, j]] = row[[0, c]];
        }
    }
    Ok(block)
}

/// Value of a scalar loss node and its gradient with respect to `leaves`.
///
/// Fails when the loss is not `1 x 1` or when any value is non-finite.
pub fn gradients(g: &mut Graph, loss: NodeId, leaves: &[NodeId], bindings: &Bindings) -> Result<(f64, Vec<Array2<f64>>)> {
    let grads = g.grad(loss, leaves);
    let mut outputs = vec![loss];
    outputs.extend(grads);
    let mut values = g.eval(&outputs, bindings)?;
    let loss_value = values.remove(0);
    if loss_value.dim() != (1, 1) {
        let (rows, cols) = loss_value.dim();
        return Err(MechError::NotScalar { rows, cols });
    }
    let loss_value = loss_value[[0, 0]];
    if !loss_value.is_finite() {
        return Err(MechError::NonFinite("loss".into()));
    }
    if values.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
        return Err(MechError::NonFinite("parameter gradient".into()));
    }
    Ok((loss_value, values))
}

/// Reverse-mode gradient of a scalar loss node with respect to every
/// parameter of one network, shaped like the parameters.
///
/// The loss may itself contain derivative nodes produced by
/// [`Graph::grad`], to any depth.
pub fn parameter_gradient(g: &mut Graph, loss: NodeId, net: &MlpGraph, bindings: &Bindings) -> Result<(f64, MlpParams)> {
    let (value, arrays) = gradients(g, loss, &net.leaves(), bindings)?;
    Ok((value, MlpParams::from_arrays(net.spec.clone(), arrays)?))
}
