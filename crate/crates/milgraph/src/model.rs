//! The full network: graph building -> embedding GNN -> {cluster head +
//! differentiable pooling -> second embedding GNN -> readout | attention
//! pooling} -> MLP classifier, with two deep-supervision heads and the
//! composite loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::graph::{propagation_matrix, BagGraph, EtaSpec};
use crate::layers::{
    affine_act, half_dim, mlp_forward, norm_eval, norm_train_batch, sage_forward, MlpBlock,
    MlpNodes, NormNodes, NormState, SageLayer,
};
use crate::matrix::Matrix;
use crate::pooling::{assign_clusters, attention_pool, diff_pool, link_pred_loss, readout, ReadoutMode};
use crate::tape::{NodeId, Tape};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingVariant {
    DiffPool,
    Attention,
}

impl PoolingVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffpool" => Ok(PoolingVariant::DiffPool),
            "attention" => Ok(PoolingVariant::Attention),
            other => Err(MilError::Config(format!(
                "unknown pooling variant `{other}`, expected diffpool or attention"
            ))),
        }
    }
}

/// Input fed to the cluster head: the raw node features V (literal reading)
/// or the embedded features Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterInput {
    RawFeatures,
    Embeddings,
}

/// Pooling applied before the deep-supervision heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DsPool {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pooling: PoolingVariant,
    pub eta: EtaSpec,
    pub clusters: usize,
    pub readout: ReadoutMode,
    pub ds_weight: f64,
    pub lp_weight: f64,
    pub feature_dim: usize,
    pub class_count: usize,
    pub self_loops: bool,
    pub cluster_input: ClusterInput,
    pub ds_pool: DsPool,
    pub sage_bias: bool,
    /// Divide the link-prediction term by K^2 so its scale does not grow
    /// with bag size.
    pub lp_normalize: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults mirror the only fully published recipe (complete graph, one
    /// cluster, auxiliary weights 0.5).
    pub fn new(feature_dim: usize) -> Self {
        ModelConfig {
            pooling: PoolingVariant::DiffPool,
            eta: EtaSpec::Infinite,
            clusters: 1,
            readout: ReadoutMode::MaxPool,
            ds_weight: 0.5,
            lp_weight: 0.5,
            feature_dim,
            class_count: 2,
            self_loops: false,
            cluster_input: ClusterInput::RawFeatures,
            ds_pool: DsPool::Max,
            sage_bias: true,
            lp_normalize: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(MilError::Config("feature_dim must be >= 1".into()));
        }
        if self.class_count < 2 {
            return Err(MilError::Config("class_count must be >= 2".into()));
        }
        if !(1..=2).contains(&self.clusters) {
            return Err(MilError::Config(format!(
                "cluster count must be 1 or 2, got {}",
                self.clusters
            )));
        }
        if self.ds_weight < 0.0 || self.lp_weight < 0.0 {
            return Err(MilError::Config("loss weights must be >= 0".into()));
        }
        if let EtaSpec::Value(v) = self.eta {
            if v < 0.0 {
                return Err(MilError::Config(format!("eta must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Dimension of the bag embedding fed to the classifier head.
    pub fn embedding_dim(&self) -> usize {
        match self.pooling {
            PoolingVariant::Attention => self.feature_dim,
            PoolingVariant::DiffPool => {
                if self.clusters == 2 && self.readout == ReadoutMode::Concat {
                    2 * self.feature_dim
                } else {
                    self.feature_dim
                }
            }
        }
    }
}

/// Cluster head: one GraphSAGE layer (with its normalization) plus one extra
/// affine + leaky-ReLU layer mapping to C cluster logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHead {
    pub sage: SageLayer,
    pub norm: NormState,
    pub mlp_weight: Matrix,
    pub mlp_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embd: SageLayer,
    pub bn_embd: NormState,
    pub cluster: Option<ClusterHead>,
    pub embd2: Option<SageLayer>,
    pub bn_embd2: Option<NormState>,
    pub att_mlp: Option<MlpBlock>,
    pub head: MlpBlock,
    pub ds_head1: MlpBlock,
    pub ds_head2: MlpBlock,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .expect("glorot shape")
}

fn sage_layer(rng: &mut ChaCha8Rng, dim_in: usize, dim_out: usize, bias: bool) -> SageLayer {
    SageLayer {
        weight: glorot(rng, dim_in, dim_out),
        bias: bias.then(|| Matrix::zeros(1, dim_out)),
        slope: LEAKY_SLOPE,
    }
}

fn mlp_block(rng: &mut ChaCha8Rng, dims: &[usize]) -> MlpBlock {
    let layers = dims
        .windows(2)
        .map(|w| (glorot(rng, w[0], w[1]), Matrix::zeros(1, w[1])))
        .collect();
    MlpBlock {
        layers,
        slope: LEAKY_SLOPE,
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.feature_dim;
        let e = cfg.embedding_dim();
        let nc = cfg.class_count;

        let embd = sage_layer(&mut rng, d, d, cfg.sage_bias);
        let bn_embd = NormState::new(d);
        let (cluster, embd2, bn_embd2, att_mlp) = match cfg.pooling {
            PoolingVariant::DiffPool => {
                let cluster = ClusterHead {
                    sage: sage_layer(&mut rng, d, d, cfg.sage_bias),
                    norm: NormState::new(d),
                    mlp_weight: glorot(&mut rng, d, cfg.clusters),
                    mlp_bias: Matrix::zeros(1, cfg.clusters),
                };
                let embd2 = sage_layer(&mut rng, d, d, cfg.sage_bias);
                (Some(cluster), Some(embd2), Some(NormState::new(d)), None)
            }
            PoolingVariant::Attention => {
                let att = mlp_block(&mut rng, &[d, half_dim(d), 1]);
                (None, None, None, Some(att))
            }
        };
        let head = mlp_block(&mut rng, &[e, half_dim(e), nc]);
        let ds_head1 = mlp_block(&mut rng, &[d, half_dim(d), nc]);
        let ds_head2 = mlp_block(&mut rng, &[d, half_dim(d), nc]);
        Ok(ModelParams {
            embd,
            bn_embd,
            cluster,
            embd2,
            bn_embd2,
            att_mlp,
            head,
            ds_head1,
            ds_head2,
        })
    }

    /// All trainable matrices in a fixed canonical order (normalization
    /// running statistics are state, not parameters).
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        fn push_sage<'a>(out: &mut Vec<&'a Matrix>, l: &'a SageLayer) {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        fn push_norm<'a>(out: &mut Vec<&'a Matrix>, n: &'a NormState) {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        fn push_mlp<'a>(out: &mut Vec<&'a Matrix>, m: &'a MlpBlock) {
            for (w, b) in &m.layers {
                out.push(w);
                out.push(b);
            }
        }
        push_sage(&mut out, &self.embd);
        push_norm(&mut out, &self.bn_embd);
        if let Some(c) = &self.cluster {
            push_sage(&mut out, &c.sage);
            push_norm(&mut out, &c.norm);
            out.push(&c.mlp_weight);
            out.push(&c.mlp_bias);
        }
        if let Some(l) = &self.embd2 {
            push_sage(&mut out, l);
        }
        if let Some(n) = &self.bn_embd2 {
            push_norm(&mut out, n);
        }
        if let Some(a) = &self.att_mlp {
            push_mlp(&mut out, a);
        }
        push_mlp(&mut out, &self.head);
        push_mlp(&mut out, &self.ds_head1);
        push_mlp(&mut out, &self.ds_head2);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        fn push_sage<'a>(out: &mut Vec<&'a mut Matrix>, l: &'a mut SageLayer) {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        fn push_norm<'a>(out: &mut Vec<&'a mut Matrix>, n: &'a mut NormState) {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        fn push_mlp<'a>(out: &mut Vec<&'a mut Matrix>, m: &'a mut MlpBlock) {
            for (w, b) in &mut m.layers {
                out.push(w);
                out.push(b);
            }
        }
        push_sage(&mut out, &mut self.embd);
        push_norm(&mut out, &mut self.bn_embd);
        if let Some(c) = &mut self.cluster {
            push_sage(&mut out, &mut c.sage);
            push_norm(&mut out, &mut c.norm);
            out.push(&mut c.mlp_weight);
            out.push(&mut c.mlp_bias);
        }
        if let Some(l) = &mut self.embd2 {
            push_sage(&mut out, l);
        }
        if let Some(n) = &mut self.bn_embd2 {
            push_norm(&mut out, n);
        }
        if let Some(a) = &mut self.att_mlp {
            push_mlp(&mut out, a);
        }
        push_mlp(&mut out, &mut self.head);
        push_mlp(&mut out, &mut self.ds_head1);
        push_mlp(&mut out, &mut self.ds_head2);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.trainable().iter().all(|m| m.all_finite())
    }

    pub fn set_all_zero(&mut self) {
        for m in self.trainable_mut() {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape bindings for every trainable matrix, structured for the forward pass
/// and flat (canonical order) for gradient extraction.
pub struct BoundParams {
    embd_w: NodeId,
    embd_b: Option<NodeId>,
    bn_embd: NormNodes,
    cluster_w: Option<NodeId>,
    cluster_b: Option<NodeId>,
    bn_cluster: Option<NormNodes>,
    cluster_mlp: Option<(NodeId, NodeId)>,
    embd2_w: Option<NodeId>,
    embd2_b: Option<NodeId>,
    bn_embd2: Option<NormNodes>,
    att_mlp: Option<MlpNodes>,
    head: MlpNodes,
    ds_head1: MlpNodes,
    ds_head2: MlpNodes,
    /// Flat view matching [`ModelParams::trainable`] order.
    pub flat: Vec<NodeId>,
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> BoundParams {
    let mut flat = Vec::new();
    let bind = |tape: &mut Tape, m: &Matrix, flat: &mut Vec<NodeId>| {
        let id = tape.leaf(m.clone());
        flat.push(id);
        id
    };
    let embd_w = bind(tape, &params.embd.weight, &mut flat);
    let embd_b = params.embd.bias.as_ref().map(|b| bind(tape, b, &mut flat));
    let bn_embd = NormNodes {
        gamma: bind(tape, &params.bn_embd.gamma, &mut flat),
        beta: bind(tape, &params.bn_embd.beta, &mut flat),
    };
    let (mut cluster_w, mut cluster_b, mut bn_cluster, mut cluster_mlp) = (None, None, None, None);
    if let Some(c) = &params.cluster {
        cluster_w = Some(bind(tape, &c.sage.weight, &mut flat));
        cluster_b = c.sage.bias.as_ref().map(|b| bind(tape, b, &mut flat));
        bn_cluster = Some(NormNodes {
            gamma: bind(tape, &c.norm.gamma, &mut flat),
            beta: bind(tape, &c.norm.beta, &mut flat),
        });
        let w = bind(tape, &c.mlp_weight, &mut flat);
        let b = bind(tape, &c.mlp_bias, &mut flat);
        cluster_mlp = Some((w, b));
    }
    let embd2_w = params.embd2.as_ref().map(|l| bind(tape, &l.weight, &mut flat));
    let embd2_b = params
        .embd2
        .as_ref()
        .and_then(|l| l.bias.as_ref())
        .map(|b| bind(tape, b, &mut flat));
    let bn_embd2 = params.bn_embd2.as_ref().map(|n| NormNodes {
        gamma: bind(tape, &n.gamma, &mut flat),
        beta: bind(tape, &n.beta, &mut flat),
    });
    let bind_mlp = |tape: &mut Tape, m: &MlpBlock, flat: &mut Vec<NodeId>| MlpNodes {
        layers: m
            .layers
            .iter()
            .map(|(w, b)| {
                let wi = tape.leaf(w.clone());
                flat.push(wi);
                let bi = tape.leaf(b.clone());
                flat.push(bi);
                (wi, bi)
            })
            .collect(),
    };
    let att_mlp = params.att_mlp.as_ref().map(|a| bind_mlp(tape, a, &mut flat));
    let head = bind_mlp(tape, &params.head, &mut flat);
    let ds_head1 = bind_mlp(tape, &params.ds_head1, &mut flat);
    let ds_head2 = bind_mlp(tape, &params.ds_head2, &mut flat);
    BoundParams {
        embd_w,
        embd_b,
        bn_embd,
        cluster_w,
        cluster_b,
        bn_cluster,
        cluster_mlp,
        embd2_w,
        embd2_b,
        bn_embd2,
        att_mlp,
        head,
        ds_head1,
        ds_head2,
        flat,
    }
}

/// Per-bag outputs of one forward pass, as tape nodes.
pub struct ForwardOutput {
    pub pred1: NodeId,
    pub pred2: NodeId,
    pub pred3: NodeId,
    pub embedding: NodeId,
    /// Row-stochastic assignment matrix (diffpool variant).
    pub assignment: Option<NodeId>,
    /// Pre-softmax cluster scores (diffpool variant).
    pub cluster_logits: Option<NodeId>,
    /// Attention weights over instances (attention variant).
    pub alpha: Option<NodeId>,
    /// The adjacency leaf, for the link-prediction term.
    pub adjacency: NodeId,
    pub num_instances: usize,
    pub label: usize,
}

fn ds_pool(tape: &mut Tape, x: NodeId, pool: DsPool) -> NodeId {
    match pool {
        DsPool::Max => tape.max_rows(x),
        DsPool::Mean => tape.mean_rows(x),
    }
}

fn norm_apply(
    tape: &mut Tape,
    state: &mut NormState,
    nodes: NormNodes,
    xs: &[NodeId],
    mode: Mode,
) -> Result<Vec<NodeId>> {
    match mode {
        Mode::Train => norm_train_batch(tape, state, nodes, xs),
        Mode::Eval => xs
            .iter()
            .map(|&x| norm_eval(tape, state, nodes, x))
            .collect(),
    }
}

/// Forward pass over a batch of graphs on one tape. Train mode pools
/// normalization statistics over the whole batch (and updates running
/// stats); eval mode uses running statistics and is a per-bag map.
pub fn forward_batch(
    tape: &mut Tape,
    params: &mut ModelParams,
    bound: &BoundParams,
    cfg: &ModelConfig,
    graphs: &[&BagGraph],
    mode: Mode,
) -> Result<Vec<ForwardOutput>> {
    if graphs.is_empty() {
        return Err(MilError::Data("forward_batch: empty batch".into()));
    }
    for g in graphs {
        if g.features.cols() != cfg.feature_dim {
            return Err(MilError::Shape(format!(
                "bag {}: feature dim {} does not match model dim {}",
                g.id,
                g.features.cols(),
                cfg.feature_dim
            )));
        }
    }

    let props: Vec<NodeId> = graphs
        .iter()
        .map(|g| tape.leaf(propagation_matrix(&g.adjacency)))
        .collect();
    let adjs: Vec<NodeId> = graphs.iter().map(|g| tape.leaf(g.adjacency.clone())).collect();
    let feats: Vec<NodeId> = graphs.iter().map(|g| tape.leaf(g.features.clone())).collect();

    // GNN_embd
    let z_pre: Vec<NodeId> = props
        .iter()
        .zip(&feats)
        .map(|(&p, &v)| sage_forward(tape, p, v, bound.embd_w, bound.embd_b, LEAKY_SLOPE))
        .collect::<Result<_>>()?;
    let z = norm_apply(tape, &mut params.bn_embd, bound.bn_embd, &z_pre, mode)?;

    let mut outputs = Vec::with_capacity(graphs.len());
    match cfg.pooling {
        PoolingVariant::DiffPool => {
            let cluster = params.cluster.as_mut().expect("diffpool params");
            let (cw, cb) = (bound.cluster_w.unwrap(), bound.cluster_b);
            let c_in: Vec<NodeId> = match cfg.cluster_input {
                ClusterInput::RawFeatures => feats.clone(),
                ClusterInput::Embeddings => z.clone(),
            };
            let c_pre: Vec<NodeId> = props
                .iter()
                .zip(&c_in)
                .map(|(&p, &v)| sage_forward(tape, p, v, cw, cb, LEAKY_SLOPE))
                .collect::<Result<_>>()?;
            let c_norm = norm_apply(
                tape,
                &mut cluster.norm,
                bound.bn_cluster.unwrap(),
                &c_pre,
                mode,
            )?;
            let (mw, mb) = bound.cluster_mlp.unwrap();
            let logits: Vec<NodeId> = c_norm
                .iter()
                .map(|&x| affine_act(tape, x, mw, mb, LEAKY_SLOPE))
                .collect::<Result<_>>()?;
            let assignments: Vec<NodeId> = logits
                .iter()
                .map(|&l| assign_clusters(tape, l))
                .collect::<Result<_>>()?;

            let mut v_stars = Vec::with_capacity(graphs.len());
            let mut p_stars = Vec::with_capacity(graphs.len());
            for ((&s, &zz), &a) in assignments.iter().zip(&z).zip(&adjs) {
                let (v_star, a_star) = diff_pool(tape, s, zz, a)?;
                let eye = tape.leaf(Matrix::identity(cfg.clusters));
                let shifted = tape.add(a_star, eye)?;
                let p_star = tape.row_normalize(shifted)?;
                v_stars.push(v_star);
                p_stars.push(p_star);
            }

            // GNN_embd2 on the coarsened graphs
            let h_pre: Vec<NodeId> = p_stars
                .iter()
                .zip(&v_stars)
                .map(|(&p, &v)| {
                    sage_forward(tape, p, v, bound.embd2_w.unwrap(), bound.embd2_b, LEAKY_SLOPE)
                })
                .collect::<Result<_>>()?;
            let h = norm_apply(
                tape,
                params.bn_embd2.as_mut().expect("diffpool bn"),
                bound.bn_embd2.unwrap(),
                &h_pre,
                mode,
            )?;

            for (i, g) in graphs.iter().enumerate() {
                let embedding = readout(tape, h[i], cfg.readout)?;
                let pred1 = mlp_forward(tape, LEAKY_SLOPE, &bound.head, embedding)?;
                let pz = ds_pool(tape, z[i], cfg.ds_pool);
                let pred2 = mlp_forward(tape, LEAKY_SLOPE, &bound.ds_head1, pz)?;
                let pv = ds_pool(tape, v_stars[i], cfg.ds_pool);
                let pred3 = mlp_forward(tape, LEAKY_SLOPE, &bound.ds_head2, pv)?;
                outputs.push(ForwardOutput {
                    pred1,
                    pred2,
                    pred3,
                    embedding,
                    assignment: Some(assignments[i]),
                    cluster_logits: Some(logits[i]),
                    alpha: None,
                    adjacency: adjs[i],
                    num_instances: g.num_nodes(),
                    label: g.label,
                });
            }
        }
        PoolingVariant::Attention => {
            let att = bound.att_mlp.as_ref().expect("attention params");
            for (i, g) in graphs.iter().enumerate() {
                let (embedding, alpha) = attention_pool(tape, z[i], att, LEAKY_SLOPE)?;
                let pred1 = mlp_forward(tape, LEAKY_SLOPE, &bound.head, embedding)?;
                let pz = ds_pool(tape, z[i], cfg.ds_pool);
                let pred2 = mlp_forward(tape, LEAKY_SLOPE, &bound.ds_head1, pz)?;
                let pred3 = mlp_forward(tape, LEAKY_SLOPE, &bound.ds_head2, embedding)?;
                outputs.push(ForwardOutput {
                    pred1,
                    pred2,
                    pred3,
                    embedding,
                    assignment: None,
                    cluster_logits: None,
                    alpha: Some(alpha),
                    adjacency: adjs[i],
                    num_instances: g.num_nodes(),
                    label: g.label,
                });
            }
        }
    }
    Ok(outputs)
}

/// Eval-mode forward on a single graph.
pub fn forward_eval(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    graph: &BagGraph,
) -> Result<ForwardOutput> {
    let bound = bind_params(tape, params);
    // eval mode never mutates the norm state
    let mut scratch = params.clone();
    let mut outs = forward_batch(tape, &mut scratch, &bound, cfg, &[graph], Mode::Eval)?;
    Ok(outs.pop().expect("one output"))
}

/// Composite loss: CE(pred1) + ds_weight·(CE(pred2) + CE(pred3))
/// + lp_weight·link_pred (diffpool only; divided by K^2 when normalized).
pub fn loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    label: usize,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let ce1 = tape.cross_entropy_logits(out.pred1, label)?;
    let ce2 = tape.cross_entropy_logits(out.pred2, label)?;
    let ce3 = tape.cross_entropy_logits(out.pred3, label)?;
    let aux = tape.add(ce2, ce3)?;
    let aux = tape.scale(aux, cfg.ds_weight);
    let mut total = tape.add(ce1, aux)?;
    if cfg.pooling == PoolingVariant::DiffPool && cfg.lp_weight > 0.0 {
        let s = out.assignment.expect("diffpool assignment");
        let lp = link_pred_loss(tape, s, out.adjacency)?;
        let norm = if cfg.lp_normalize {
            (out.num_instances * out.num_instances) as f64
        } else {
            1.0
        };
        let lp = tape.scale(lp, cfg.lp_weight / norm);
        total = tape.add(total, lp)?;
    }
    Ok(total)
}

/// Argmax of the main prediction logits; ties break toward the lower index.
pub fn predict(tape: &Tape, out: &ForwardOutput) -> usize {
    argmax_row(tape.value(out.pred1).row(0))
}

pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// On-disk checkpoint: config plus all parameter tensors and normalization
/// running statistics. JSON with shortest-roundtrip floats, so write-then-read
/// reproduces every value bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Normalizer fitted on the training bags, needed to score new data.
    pub normalizer: Option<crate::data::Normalizer>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(MilError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Bag;
    use crate::graph::{build_graph, Eta};
    use crate::pooling::ReadoutMode;

    fn bag(id: &str, label: usize, rows: &[&[f64]]) -> Bag {
        Bag {
            id: id.to_string(),
            label,
            instances: Matrix::from_rows(rows),
            instance_labels: None,
        }
    }

    fn graph_of(bag: &Bag, eta: Eta) -> BagGraph {
        build_graph(bag, eta, false).unwrap()
    }

    fn batch_loss_value(params: &ModelParams, cfg: &ModelConfig, graphs: &[&BagGraph]) -> f64 {
        let mut tape = Tape::new();
        let mut scratch = params.clone();
        let bound = bind_params(&mut tape, params);
        let outs = forward_batch(&mut tape, &mut scratch, &bound, cfg, graphs, Mode::Train).unwrap();
        let mut total: Option<NodeId> = None;
        for o in &outs {
            let l = loss(&mut tape, o, o.label, cfg).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / outs.len() as f64);
        tape.value(mean).get(0, 0)
    }

    fn batch_loss_grads(params: &ModelParams, cfg: &ModelConfig, graphs: &[&BagGraph]) -> Vec<Matrix> {
        let mut tape = Tape::new();
        let mut scratch = params.clone();
        let bound = bind_params(&mut tape, params);
        let outs = forward_batch(&mut tape, &mut scratch, &bound, cfg, graphs, Mode::Train).unwrap();
        let mut total: Option<NodeId> = None;
        for o in &outs {
            let l = loss(&mut tape, o, o.label, cfg).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / outs.len() as f64);
        tape.backward(mean).unwrap();
        bound.flat.iter().map(|&id| tape.grad(id).clone()).collect()
    }

    fn fd_check_model(params: &ModelParams, cfg: &ModelConfig, graphs: &[&BagGraph]) {
        let grads = batch_loss_grads(params, cfg, graphs);
        let h = 1e-5;
        let n_params = params.trainable().len();
        assert_eq!(grads.len(), n_params);
        for p in 0..n_params {
            let n_elems = params.trainable()[p].len();
            for e in 0..n_elems {
                let mut plus = params.clone();
                plus.trainable_mut()[p].data_mut()[e] += h;
                let mut minus = params.clone();
                minus.trainable_mut()[p].data_mut()[e] -= h;
                let fd = (batch_loss_value(&plus, cfg, graphs)
                    - batch_loss_value(&minus, cfg, graphs))
                    / (2.0 * h);
                let an = grads[p].data()[e];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "param {p} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn single_instance_single_cluster_runs() {
        let cfg = ModelConfig::new(3);
        let params = ModelParams::init(&cfg).unwrap();
        let b = bag("b0", 1, &[&[0.3, -0.2, 0.8]]);
        let g = graph_of(&b, Eta::Infinite);
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        let s = tape.value(out.assignment.unwrap());
        assert_eq!(s.shape(), (1, 1));
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(tape.value(out.pred1).shape(), (1, 2));
        assert!(tape.value(out.embedding).all_finite());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = ModelConfig::new(4);
        let mut params = ModelParams::init(&cfg).unwrap();
        params.set_all_zero();
        let b = bag("b0", 0, &[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 2.0]]);
        let g = graph_of(&b, Eta::Infinite);
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        for &p in &[out.pred1, out.pred2, out.pred3] {
            assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn loss_arithmetic_at_zero_logits() {
        // CE at zero logits over two classes is ln 2; with ds weight 0.5 the
        // total is ln2 + 0.5*(ln2 + ln2) = 2 ln2 when the link term is off.
        let mut cfg = ModelConfig::new(4);
        cfg.lp_weight = 0.0;
        let mut params = ModelParams::init(&cfg).unwrap();
        params.set_all_zero();
        let b = bag("b0", 0, &[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 2.0]]);
        let g = graph_of(&b, Eta::Infinite);
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        let l = loss(&mut tape, &out, 0, &cfg).unwrap();
        let expect = 2.0 * (2.0f64).ln();
        assert!((tape.value(l).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn link_term_arithmetic_single_cluster() {
        // With one cluster S is the all-ones column, so S S^T is all ones.
        // For a complete 2-node graph only the two diagonal entries differ,
        // giving a Frobenius norm of sqrt(2); normalized by K^2 = 4.
        let mut cfg = ModelConfig::new(4);
        let mut params = ModelParams::init(&cfg).unwrap();
        params.set_all_zero();
        let b = bag("b0", 0, &[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 2.0]]);
        let g = graph_of(&b, Eta::Infinite);

        cfg.lp_weight = 0.0;
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        let l = loss(&mut tape, &out, 0, &cfg).unwrap();
        let base = tape.value(l).get(0, 0);

        cfg.lp_weight = 1.0;
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        let l = loss(&mut tape, &out, 0, &cfg).unwrap();
        let with_lp = tape.value(l).get(0, 0);

        assert!((with_lp - base - 2.0f64.sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_tiny_loss() {
        let mut cfg = ModelConfig::new(3);
        cfg.ds_weight = 0.0;
        cfg.lp_weight = 0.0;
        let mut params = ModelParams::init(&cfg).unwrap();
        params.set_all_zero();
        // final classifier bias produces logits [10, -10]: margin 20
        let last = params.head.layers.len() - 1;
        params.head.layers[last].1.set(0, 0, 10.0);
        params.head.layers[last].1.set(0, 1, -10.0);
        let b = bag("b0", 0, &[&[0.5, 0.5, 0.5]]);
        let g = graph_of(&b, Eta::Infinite);
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();
        let l = loss(&mut tape, &out, 0, &cfg).unwrap();
        assert!(tape.value(l).get(0, 0) < 1e-3);
        assert_eq!(predict(&tape, &out), 0);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_row(&[0.0, 0.0]), 0);
        assert_eq!(argmax_row(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_row(&[-2.0, -1.0]), 1);
    }

    #[test]
    fn eval_predictions_are_permutation_invariant() {
        for pooling in [PoolingVariant::DiffPool, PoolingVariant::Attention] {
            let mut cfg = ModelConfig::new(3);
            cfg.pooling = pooling;
            cfg.clusters = if pooling == PoolingVariant::DiffPool { 2 } else { 1 };
            cfg.seed = 7;
            let params = ModelParams::init(&cfg).unwrap();
            let rows: Vec<Vec<f64>> = vec![
                vec![0.1, -0.4, 0.9],
                vec![1.2, 0.3, -0.7],
                vec![-0.5, 0.8, 0.2],
                vec![0.0, 0.0, 1.5],
            ];
            let perm = [2usize, 0, 3, 1];
            let orig: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let shuffled: Vec<&[f64]> = perm.iter().map(|&i| rows[i].as_slice()).collect();
            let g1 = graph_of(&bag("a", 1, &orig), Eta::Value(1.4));
            let g2 = graph_of(&bag("a", 1, &shuffled), Eta::Value(1.4));
            let mut t1 = Tape::new();
            let o1 = forward_eval(&mut t1, &params, &cfg, &g1).unwrap();
            let mut t2 = Tape::new();
            let o2 = forward_eval(&mut t2, &params, &cfg, &g2).unwrap();
            let d = t1
                .value(o1.pred1)
                .max_abs_diff(t2.value(o2.pred1));
            assert!(d < 1e-9, "{pooling:?}: pred diff {d}");
        }
    }

    #[test]
    fn empty_graph_single_cluster_reduces_to_instance_network() {
        // With eta = 0, one cluster, and the link term off, the network is an
        // instance-wise map followed by a sum over instances. Recompute that
        // reduction with plain matrix arithmetic as an independent oracle.
        let mut cfg = ModelConfig::new(3);
        cfg.lp_weight = 0.0;
        cfg.seed = 11;
        let params = ModelParams::init(&cfg).unwrap();
        let b = bag(
            "b",
            1,
            &[&[0.2, -1.0, 0.4], &[1.1, 0.5, -0.3], &[-0.6, 0.9, 0.7]],
        );
        let g = graph_of(&b, Eta::Value(0.0));
        let mut tape = Tape::new();
        let out = forward_eval(&mut tape, &params, &cfg, &g).unwrap();

        let leaky = |m: &Matrix| m.map(|v| if v >= 0.0 { v } else { 0.01 * v });
        let norm_with = |m: &Matrix, st: &NormState| -> Matrix {
            let mut r = m.clone();
            for i in 0..r.rows() {
                for j in 0..r.cols() {
                    let z = (r.get(i, j) - st.running_mean.get(0, j))
                        / (st.running_var.get(0, j) + st.eps).sqrt();
                    r.set(i, j, z * st.gamma.get(0, j) + st.beta.get(0, j));
                }
            }
            r
        };
        let affine = |m: &Matrix, w: &Matrix, bb: &Matrix| -> Matrix {
            let mut r = m.matmul(w).unwrap();
            for i in 0..r.rows() {
                for j in 0..r.cols() {
                    r.set(i, j, r.get(i, j) + bb.get(0, j));
                }
            }
            r
        };

        // per-instance embedding (propagation is the identity)
        let z0 = affine(&b.instances, &params.embd.weight, params.embd.bias.as_ref().unwrap());
        let z = norm_with(&leaky(&z0), &params.bn_embd);
        // single cluster: v* is the column sum of z
        let mut v_star = Matrix::zeros(1, 3);
        for j in 0..3 {
            let s: f64 = (0..3).map(|i| z.get(i, j)).sum();
            v_star.set(0, j, s);
        }
        let e2 = params.embd2.as_ref().unwrap();
        let h0 = affine(&v_star, &e2.weight, e2.bias.as_ref().unwrap());
        let h = norm_with(&leaky(&h0), params.bn_embd2.as_ref().unwrap());
        // classifier head
        let hid = leaky(&affine(&h, &params.head.layers[0].0, &params.head.layers[0].1));
        let logits = affine(&hid, &params.head.layers[1].0, &params.head.layers[1].1);

        let got = tape.value(out.pred1);
        let d = got.max_abs_diff(&logits);
        assert!(d < 1e-9, "diff {d}");
    }

    #[test]
    fn gradients_match_finite_differences_diffpool() {
        let mut cfg = ModelConfig::new(3);
        cfg.clusters = 2;
        cfg.readout = ReadoutMode::Concat;
        cfg.seed = 3;
        let params = ModelParams::init(&cfg).unwrap();
        let b1 = bag("a", 0, &[&[0.2, -0.7, 0.5], &[0.9, 0.1, -0.4]]);
        let b2 = bag("b", 1, &[&[-0.3, 0.6, 1.0], &[0.4, -0.8, 0.2], &[1.1, 0.0, -0.5]]);
        let g1 = graph_of(&b1, Eta::Value(1.5));
        let g2 = graph_of(&b2, Eta::Value(1.5));
        fd_check_model(&params, &cfg, &[&g1, &g2]);
    }

    #[test]
    fn gradients_match_finite_differences_attention() {
        let mut cfg = ModelConfig::new(3);
        cfg.pooling = PoolingVariant::Attention;
        cfg.seed = 5;
        let params = ModelParams::init(&cfg).unwrap();
        let b1 = bag("a", 1, &[&[0.5, -0.2, 0.8], &[-0.9, 0.4, 0.1]]);
        let b2 = bag("b", 0, &[&[0.3, 0.7, -0.6]]);
        let g1 = graph_of(&b1, Eta::Infinite);
        let g2 = graph_of(&b2, Eta::Infinite);
        fd_check_model(&params, &cfg, &[&g1, &g2]);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut cfg = ModelConfig::new(5);
        cfg.clusters = 2;
        cfg.seed = 42;
        let params = ModelParams::init(&cfg).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params: params.clone(),
            normalizer: Some(crate::data::Normalizer {
                mean: vec![0.1, -0.2, 1e-300, 3.5, 0.0],
                std: vec![1.0, 2.0, 1.0, 0.5, 3.0],
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.params, params);
        assert_eq!(back.normalizer, ckpt.normalizer);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = ModelConfig::new(3);
        cfg.clusters = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(3);
        cfg.ds_weight = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(0);
        cfg.feature_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let cfg = ModelConfig::new(4);
        let params = ModelParams::init(&cfg).unwrap();
        let b = bag("b", 0, &[&[1.0, 2.0, 3.0]]);
        let g = graph_of(&b, Eta::Infinite);
        let mut tape = Tape::new();
        assert!(forward_eval(&mut tape, &params, &cfg, &g).is_err());
    }
}
