//! Reverse-mode automatic differentiation on a graph of batched dense
//! blocks, plus the perceptron built on top of it.
//!
//! Every node holds a `batch x width` matrix whose rows are independent
//! samples. [`Graph::grad`] appends the adjoint computation as new nodes, so
//! a gradient can itself be differentiated (the Lagrangian loss needs three
//! levels).

mod graph;
mod mlp;

use ndarray::Array2;

pub use graph::{Bindings, Graph, NodeId, Unary, Width, MAX_CONDITION};
pub use mlp::{gradients, input_gradient, input_hessian_block, mlp_forward, parameter_gradient, Activation, Layer, MlpGraph, MlpParams, MlpSpec};

/// Hamilton's equations for a scalar energy node `h` of a `batch x 2n`
/// state `x = (q, p)`: returns `(∂H/∂p, -∂H/∂q)`.
pub fn symplectic_field(g: &mut Graph, h: NodeId, x: NodeId, dof: usize) -> NodeId {
    let dh = g.grad(h, &[x])[0];
    let dq = g.slice_cols(dh, dof, dof);
    let dhdq = g.slice_cols(dh, 0, dof);
    let dp = g.neg(dhdq);
    g.concat_cols(&[(dq, dof), (dp, dof)])
}

/// Accelerations solving the Euler-Lagrange equations for a scalar energy
/// node `l` of a `batch x 2n` state `x = (q, q̇)`:
///
/// `q̈ = (∇²_q̇ L + reg·I)⁻¹ (∇_q L - ∇_q̇∇_q L · q̇)`
///
/// Row `i` of both Hessian blocks comes from one extra backward pass through
/// `∂L/∂q̇_i`. `reg = 0` adds no node.
pub fn euler_lagrange(g: &mut Graph, l: NodeId, x: NodeId, dof: usize, reg: f64) -> NodeId {
    let n = dof;
    let dl = g.grad(l, &[x])[0];
    let dq = g.slice_cols(dl, 0, n);
    let qdot = g.slice_cols(x, n, n);
    let mut mvq = Vec::with_capacity(n);
    let mut mvv = Vec::with_capacity(n);
    for i in 0..n {
        let dv = g.slice_cols(dl, n + i, 1);
        let row = g.grad(dv, &[x])[0];
        mvq.push((g.slice_cols(row, 0, n), n));
        mvv.push((g.slice_cols(row, n, n), n));
    }
    let mvq = g.concat_cols(&mvq);
    let mut mvv = g.concat_cols(&mvv);
    if reg != 0.0 {
        let eye = Array2::from_shape_fn((1, n * n), |(_, k)| if k / n == k % n { reg } else { 0.0 });
        let eye = g.constant(eye);
        mvv = g.add(mvv, eye);
    }
    let coupling = g.batch_matvec(mvq, qdot, false);
    let rhs = g.sub(dq, coupling);
    g.batch_solve(mvv, rhs, false)
}
