//! Network building blocks: the GraphSAGE mean-variant layer, batch
//! normalization over node rows, and MLP blocks.
//!
//! Parameter structs own plain matrices; forward functions operate on tape
//! node ids so a caller can bind the same parameters into any tape.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

/// GraphSAGE mean variant: `v_k <- act(W · MEAN(v_u, u in N(k) ∪ {k}) + b)`.
/// The weight is stored input-dim x output-dim so features multiply on the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageLayer {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
    pub slope: f64,
}

/// `prop` is the row-normalized closed-neighborhood matrix
/// ([`crate::graph::propagation_matrix`], or its differentiable analogue for
/// coarsened graphs). Isolated nodes average over themselves alone.
pub fn sage_forward(
    tape: &mut Tape,
    prop: NodeId,
    features: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    slope: f64,
) -> Result<NodeId> {
    let agg = tape.matmul(prop, features)?;
    let mut lin = tape.matmul(agg, weight)?;
    if let Some(b) = bias {
        lin = tape.add_row(lin, b)?;
    }
    tape.leaky_relu(lin, slope)
}

/// Batch normalization state: learned scale/shift plus running statistics.
/// Train mode pools statistics over all node rows of all graphs in the
/// mini-batch; eval mode is a deterministic per-row map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub momentum: f64,
    pub eps: f64,
}

impl NormState {
    pub fn new(dim: usize) -> Self {
        NormState {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
            running_mean: Matrix::zeros(1, dim),
            running_var: Matrix::filled(1, dim, 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Tape bindings for the trainable part of a [`NormState`].
#[derive(Debug, Clone, Copy)]
pub struct NormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub fn norm_eval(
    tape: &mut Tape,
    state: &NormState,
    nodes: NormNodes,
    x: NodeId,
) -> Result<NodeId> {
    let neg_mean = tape.leaf(state.running_mean.map(|v| -v));
    let inv_std = tape.leaf(state.running_var.map(|v| 1.0 / (v + state.eps).sqrt()));
    let centered = tape.add_row(x, neg_mean)?;
    let scaled = tape.mul_row(centered, inv_std)?;
    let g = tape.mul_row(scaled, nodes.gamma)?;
    tape.add_row(g, nodes.beta)
}

/// Train-mode normalization of every matrix in `xs` with statistics pooled
/// over all their rows; gradients flow through the batch statistics. Updates
/// the running statistics in place (biased variance, momentum blend).
pub fn norm_train_batch(
    tape: &mut Tape,
    state: &mut NormState,
    nodes: NormNodes,
    xs: &[NodeId],
) -> Result<Vec<NodeId>> {
    let all = tape.concat_rows_all(xs)?;
    let mean = tape.mean_rows(all);
    let neg_mean = tape.scale(mean, -1.0);
    let centered = tape.add_row(all, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq);
    let inv_std = tape.rsqrt_eps(var, state.eps);

    let m = state.momentum;
    state.running_mean = state
        .running_mean
        .zip_map(tape.value(mean), |r, b| (1.0 - m) * r + m * b)?;
    state.running_var = state
        .running_var
        .zip_map(tape.value(var), |r, b| (1.0 - m) * r + m * b)?;

    xs.iter()
        .map(|&x| {
            let c = tape.add_row(x, neg_mean)?;
            let s = tape.mul_row(c, inv_std)?;
            let g = tape.mul_row(s, nodes.gamma)?;
            tape.add_row(g, nodes.beta)
        })
        .collect()
}

/// A stack of affine layers with leaky-ReLU between them; the final layer is
/// affine only (logits). Weights are input-dim x output-dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpBlock {
    pub layers: Vec<(Matrix, Matrix)>,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

pub fn mlp_forward(tape: &mut Tape, block_slope: f64, nodes: &MlpNodes, input: NodeId) -> Result<NodeId> {
    let mut h = input;
    let last = nodes.layers.len() - 1;
    for (i, &(w, b)) in nodes.layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
        if i < last {
            h = tape.leaky_relu(h, block_slope)?;
        }
    }
    Ok(h)
}

/// Single affine + leaky-ReLU layer (the extra MLP layer of the cluster head).
pub fn affine_act(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    slope: f64,
) -> Result<NodeId> {
    let lin = tape.matmul(x, w)?;
    let lin = tape.add_row(lin, b)?;
    tape.leaky_relu(lin, slope)
}

/// Hidden width of the 2-layer classifier heads: half the input, at least 1.
pub fn half_dim(dim: usize) -> usize {
    (dim / 2).max(1)
}
