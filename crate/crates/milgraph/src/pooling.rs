//! Aggregation of node embeddings into a bag embedding: differentiable
//! pooling (assignment softmax, graph coarsening, link-prediction
//! regularizer) and attention-weighted pooling, plus the final readout.

use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::layers::{mlp_forward, MlpNodes};
use crate::tape::{NodeId, Tape};

/// Readout of the coarsened node embeddings when C > 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadoutMode {
    MaxPool,
    Concat,
}

impl ReadoutMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ReadoutMode::MaxPool),
            "concat" => Ok(ReadoutMode::Concat),
            other => Err(MilError::Config(format!(
                "unknown readout mode `{other}`, expected max or concat"
            ))),
        }
    }
}

/// Row-wise softmax of the cluster-head logits: the KxC row-stochastic
/// assignment matrix S.
pub fn assign_clusters(tape: &mut Tape, cluster_logits: NodeId) -> Result<NodeId> {
    let c = tape.value(cluster_logits).cols();
    if c < 1 {
        return Err(MilError::Config("cluster count must be >= 1".into()));
    }
    Ok(tape.softmax_rows(cluster_logits))
}

/// Coarsen a graph to C nodes: `V* = S^T Z`, `A* = S^T A S`.
pub fn diff_pool(
    tape: &mut Tape,
    s: NodeId,
    z: NodeId,
    a: NodeId,
) -> Result<(NodeId, NodeId)> {
    let st = tape.transpose(s);
    let v_star = tape.matmul(st, z)?;
    let sta = tape.matmul(st, a)?;
    let a_star = tape.matmul(sta, s)?;
    Ok((v_star, a_star))
}

/// Link-prediction regularizer `||A - S S^T||_F` (unnormalized; the model
/// loss divides by K^2 when configured).
pub fn link_pred_loss(tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId> {
    let st = tape.transpose(s);
    let sst = tape.matmul(s, st)?;
    let diff = tape.sub(a, sst)?;
    Ok(tape.frobenius_norm(diff))
}

/// Attention aggregation: per-node scores from `att_mlp` (final output dim 1),
/// softmax-normalized over all instances; returns the pooled 1xD' embedding
/// and the 1xK weight row.
pub fn attention_pool(
    tape: &mut Tape,
    z: NodeId,
    att_mlp: &MlpNodes,
    slope: f64,
) -> Result<(NodeId, NodeId)> {
    let scores = mlp_forward(tape, slope, att_mlp, z)?;
    if tape.value(scores).cols() != 1 {
        return Err(MilError::Shape(format!(
            "attention MLP must end in one output, got {}",
            tape.value(scores).cols()
        )));
    }
    let row = tape.transpose(scores);
    let alpha = tape.softmax_rows(row);
    let pooled = tape.matmul(alpha, z)?;
    Ok((pooled, alpha))
}

/// Reduce the CxD' coarse embeddings to one row. C = 1 is the identity on the
/// single row; otherwise max-pool over rows or concatenation into 1 x C·D'.
pub fn readout(tape: &mut Tape, coarse: NodeId, mode: ReadoutMode) -> Result<NodeId> {
    let (c, d) = tape.value(coarse).shape();
    if c == 1 {
        return Ok(coarse);
    }
    match mode {
        ReadoutMode::MaxPool => Ok(tape.max_rows(coarse)),
        ReadoutMode::Concat => tape.reshape(coarse, 1, c * d),
    }
}
