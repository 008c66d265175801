//! The five two-layer architectures and their configuration.
//!
//! All models share the aggregation template: transform node features, pull
//! them across edges with a per-edge coefficient, apply a nonlinearity, and
//! repeat once more into class logits. GCN and GraphSAGE-mean bake the
//! coefficients into a fixed sparse operator; GAT learns them per edge via
//! attention; the MLP ignores the graph entirely.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{edge_index_with_self_loops, gcn_operator, sage_mean_operator, Graph};
use crate::sparse::{EdgeIndex, SparseOperator};
use crate::tape::{Activation, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Gcn,
    Gcn64,
    Sage,
    Gat,
    Mlp,
}

impl ModelKind {
    pub fn all() -> [ModelKind; 5] {
        [
            ModelKind::Gcn,
            ModelKind::Gcn64,
            ModelKind::Sage,
            ModelKind::Gat,
            ModelKind::Mlp,
        ]
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gcn64 => "gcn64",
            ModelKind::Sage => "sage",
            ModelKind::Gat => "gat",
            ModelKind::Mlp => "mlp",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(ModelKind::Gcn),
            "gcn64" | "gcn-64" => Ok(ModelKind::Gcn64),
            "sage" | "graphsage" => Ok(ModelKind::Sage),
            "gat" => Ok(ModelKind::Gat),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(format!(
                "unknown model {other:?}, expected gcn|gcn64|sage|gat|mlp"
            )),
        }
    }
}

/// Architecture and training hyperparameters for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden units per layer; for GAT, hidden units per head.
    pub hidden: usize,
    /// Attention heads per layer; ignored outside GAT.
    pub heads: (usize, usize),
    pub dropout: f64,
    /// Nonlinearity between the two layers.
    pub activation: Activation,
    /// Negative slope of the attention score nonlinearity (GAT only).
    pub attention_slope: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Bias terms: hidden layer of the MLP, both layers of graph models.
    pub bias: bool,
}

impl ModelConfig {
    /// The defaults from the original works, including the Pubmed-specific
    /// GAT overrides (8 output heads, lr 0.01, weight decay 1e-3).
    pub fn for_dataset(kind: ModelKind, dataset: &str) -> ModelConfig {
        let pubmed = dataset.eq_ignore_ascii_case("pubmed");
        match kind {
            ModelKind::Gcn => ModelConfig {
                kind,
                hidden: 16,
                heads: (1, 1),
                dropout: 0.5,
                activation: Activation::Relu,
                attention_slope: 0.2,
                learning_rate: 0.005,
                weight_decay: 5e-4,
                bias: false,
            },
            ModelKind::Gcn64 => ModelConfig {
                hidden: 64,
                ..ModelConfig::for_dataset(ModelKind::Gcn, dataset)
            }
            .with_kind(kind),
            ModelKind::Sage => ModelConfig {
                kind,
                hidden: 64,
                heads: (1, 1),
                dropout: 0.5,
                activation: Activation::Relu,
                attention_slope: 0.2,
                learning_rate: 0.01,
                weight_decay: 5e-4,
                bias: false,
            },
            ModelKind::Gat => ModelConfig {
                kind,
                hidden: 8,
                heads: (8, if pubmed { 8 } else { 1 }),
                dropout: 0.5,
                activation: Activation::Elu,
                attention_slope: 0.2,
                learning_rate: if pubmed { 0.01 } else { 0.005 },
                weight_decay: if pubmed { 1e-3 } else { 5e-4 },
                bias: false,
            },
            ModelKind::Mlp => ModelConfig {
                kind,
                hidden: 64,
                heads: (1, 1),
                dropout: 0.5,
                activation: Activation::Relu,
                attention_slope: 0.2,
                learning_rate: 0.005,
                weight_decay: 5e-4,
                bias: true,
            },
        }
    }

    fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    /// Stable hash of the full configuration, stored in checkpoints.
    pub fn stable_hash(&self) -> u64 {
        let activation = match self.activation {
            Activation::Relu => "relu".to_string(),
            Activation::Elu => "elu".to_string(),
            Activation::LeakyRelu(s) => format!("leaky{s}"),
        };
        let canonical = format!(
            "{}|h{}|heads{},{}|p{}|{}|slope{}|lr{}|wd{}|bias{}",
            self.kind,
            self.hidden,
            self.heads.0,
            self.heads.1,
            self.dropout,
            activation,
            self.attention_slope,
            self.learning_rate,
            self.weight_decay,
            self.bias
        );
        crate::seed::fnv1a(canonical.as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Trainable tensors in a fixed order shared by initialization, the forward
/// pass, the optimizer, and checkpoints.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub tensors: Vec<NamedTensor>,
}

impl ModelParams {
    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Uniform Glorot initialization on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
        .collect();
    Tensor::from_vec(rows, cols, values).expect("length fixed by construction")
}

/// Shapes follow the layer layout: `zero` marks tensors initialized to zero
/// (biases) rather than Glorot.
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
    zero: bool,
}

fn param_shapes(config: &ModelConfig, num_features: usize, num_classes: usize) -> Vec<ParamShape> {
    let mut shapes = Vec::new();
    let weight = |name: String, rows, cols| ParamShape {
        name,
        rows,
        cols,
        zero: false,
    };
    let bias = |name: String, cols| ParamShape {
        name,
        rows: 1,
        cols,
        zero: true,
    };
    match config.kind {
        ModelKind::Gcn | ModelKind::Gcn64 | ModelKind::Sage => {
            shapes.push(weight("w1".into(), num_features, config.hidden));
            if config.bias {
                shapes.push(bias("b1".into(), config.hidden));
            }
            shapes.push(weight("w2".into(), config.hidden, num_classes));
            if config.bias {
                shapes.push(bias("b2".into(), num_classes));
            }
        }
        ModelKind::Mlp => {
            shapes.push(weight("w1".into(), num_features, config.hidden));
            if config.bias {
                shapes.push(bias("b1".into(), config.hidden));
            }
            shapes.push(weight("w2".into(), config.hidden, num_classes));
        }
        ModelKind::Gat => {
            for k in 0..config.heads.0 {
                shapes.push(weight(format!("w1.{k}"), num_features, config.hidden));
                shapes.push(weight(format!("a1_dst.{k}"), config.hidden, 1));
                shapes.push(weight(format!("a1_src.{k}"), config.hidden, 1));
            }
            let layer2_in = config.hidden * config.heads.0;
            for k in 0..config.heads.1 {
                shapes.push(weight(format!("w2.{k}"), layer2_in, num_classes));
                shapes.push(weight(format!("a2_dst.{k}"), num_classes, 1));
                shapes.push(weight(format!("a2_src.{k}"), num_classes, 1));
            }
        }
    }
    shapes
}

/// Glorot-initialized parameters in canonical order.
pub fn init_params(
    config: &ModelConfig,
    num_features: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> ModelParams {
    let tensors = param_shapes(config, num_features, num_classes)
        .into_iter()
        .map(|s| NamedTensor {
            value: if s.zero {
                Tensor::zeros(s.rows, s.cols)
            } else {
                glorot_init(s.rows, s.cols, rng)
            },
            name: s.name,
        })
        .collect();
    ModelParams { tensors }
}

/// Exact trainable-scalar count for a configuration on a dataset shape.
pub fn param_count(config: &ModelConfig, num_features: usize, num_classes: usize) -> usize {
    param_shapes(config, num_features, num_classes)
        .iter()
        .map(|s| s.rows * s.cols)
        .sum()
}

/// Graph structure in the form the model consumes.
#[derive(Clone)]
pub enum GraphSupport {
    /// Fixed-coefficient aggregation (GCN, GraphSAGE-mean).
    Operator(Arc<SparseOperator>),
    /// Destination-grouped edges for attention (GAT).
    Edges(Arc<EdgeIndex>),
    /// No structure (MLP).
    Dense,
}

impl GraphSupport {
    fn operator(&self) -> Result<&Arc<SparseOperator>> {
        match self {
            GraphSupport::Operator(op) => Ok(op),
            _ => Err(Error::InvalidParameter {
                name: "graph_support",
                reason: "model expects a sparse operator".into(),
            }),
        }
    }

    fn edges(&self) -> Result<&Arc<EdgeIndex>> {
        match self {
            GraphSupport::Edges(e) => Ok(e),
            _ => Err(Error::InvalidParameter {
                name: "graph_support",
                reason: "model expects an edge index".into(),
            }),
        }
    }
}

/// Builds the support a model kind needs from a graph. Cheap enough to call
/// once per phase; reused across epochs.
pub fn graph_support(kind: ModelKind, graph: &Graph) -> GraphSupport {
    match kind {
        ModelKind::Gcn | ModelKind::Gcn64 => GraphSupport::Operator(gcn_operator(graph)),
        ModelKind::Sage => GraphSupport::Operator(sage_mean_operator(graph)),
        ModelKind::Gat => GraphSupport::Edges(edge_index_with_self_loops(graph)),
        ModelKind::Mlp => GraphSupport::Dense,
    }
}

/// Result of recording one forward pass on a tape.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Tape nodes of the trainable tensors, in `ModelParams` order.
    pub params: Vec<NodeId>,
}

/// Records the model's forward computation onto `tape` and returns the
/// class logits (one row per node).
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    support: &GraphSupport,
    features: &Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass> {
    let param_nodes: Vec<NodeId> = params
        .tensors
        .iter()
        .map(|t| tape.param(t.value.clone()))
        .collect();
    let x = tape.input(features.clone());

    let logits = match config.kind {
        ModelKind::Gcn | ModelKind::Gcn64 | ModelKind::Sage => {
            let op = support.operator()?;
            let mut idx = param_nodes.iter().copied();
            let w1 = idx.next().expect("w1");
            let b1 = config.bias.then(|| idx.next().expect("b1"));
            let w2 = idx.next().expect("w2");
            let b2 = config.bias.then(|| idx.next().expect("b2"));

            let xd = tape.dropout(x, config.dropout, training, rng)?;
            let xw = tape.matmul(xd, w1)?;
            let mut h = tape.spmm(op, xw)?;
            if let Some(b) = b1 {
                h = tape.add_row_bias(h, b)?;
            }
            let ha = tape.activation(h, config.activation);
            let hd = tape.dropout(ha, config.dropout, training, rng)?;
            let hw = tape.matmul(hd, w2)?;
            let mut out = tape.spmm(op, hw)?;
            if let Some(b) = b2 {
                out = tape.add_row_bias(out, b)?;
            }
            out
        }
        ModelKind::Mlp => {
            let mut idx = param_nodes.iter().copied();
            let w1 = idx.next().expect("w1");
            let b1 = config.bias.then(|| idx.next().expect("b1"));
            let w2 = idx.next().expect("w2");

            let xd = tape.dropout(x, config.dropout, training, rng)?;
            let mut h = tape.matmul(xd, w1)?;
            if let Some(b) = b1 {
                h = tape.add_row_bias(h, b)?;
            }
            let ha = tape.activation(h, config.activation);
            let hd = tape.dropout(ha, config.dropout, training, rng)?;
            tape.matmul(hd, w2)?
        }
        ModelKind::Gat => {
            let edges = support.edges()?;
            let xd = tape.dropout(x, config.dropout, training, rng)?;

            let attention_layer = |tape: &mut Tape,
                                   input: NodeId,
                                   w: NodeId,
                                   a_dst: NodeId,
                                   a_src: NodeId|
             -> Result<NodeId> {
                let h = tape.matmul(input, w)?;
                let u = tape.matmul(h, a_dst)?;
                let v = tape.matmul(h, a_src)?;
                let pieces = tape.edge_gather_sum(u, v, edges)?;
                let scores =
                    tape.activation(pieces, Activation::LeakyRelu(config.attention_slope));
                let alpha = tape.segment_softmax(scores, edges)?;
                tape.edge_aggregate(alpha, h, edges)
            };

            let mut cursor = param_nodes.iter().copied();
            let mut head_outputs = Vec::with_capacity(config.heads.0);
            for _ in 0..config.heads.0 {
                let w = cursor.next().expect("w1.k");
                let a_dst = cursor.next().expect("a1_dst.k");
                let a_src = cursor.next().expect("a1_src.k");
                head_outputs.push(attention_layer(tape, xd, w, a_dst, a_src)?);
            }
            let concat = tape.concat_cols(&head_outputs)?;
            let act = tape.activation(concat, Activation::Elu);
            let hd = tape.dropout(act, config.dropout, training, rng)?;

            let mut second = Vec::with_capacity(config.heads.1);
            for _ in 0..config.heads.1 {
                let w = cursor.next().expect("w2.k");
                let a_dst = cursor.next().expect("a2_dst.k");
                let a_src = cursor.next().expect("a2_src.k");
                second.push(attention_layer(tape, hd, w, a_dst, a_src)?);
            }
            let mut sum = second[0];
            for &head in &second[1..] {
                sum = tape.add(sum, head)?;
            }
            if second.len() > 1 {
                sum = tape.scale(sum, 1.0 / second.len() as f64);
            }
            sum
        }
    };

    Ok(ForwardPass {
        logits,
        params: param_nodes,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GNNP";

/// Writes parameters in the flat binary checkpoint layout: magic, config
/// hash, tensor count, then per tensor (name length, name bytes, rows,
/// cols, row-major 64-bit little-endian floats).
pub fn save_params(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&config.stable_hash().to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.value.cols() as u32).to_le_bytes());
        for &v in t.value.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`], validating the config hash.
pub fn load_params(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let mut file = fs::File::open(path).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let slice = &buf[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    if hash != config.stable_hash() {
        return Err(Error::Checkpoint(format!(
            "config hash {hash:#x} does not match expected {:#x}",
            config.stable_hash()
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name,
            value: Tensor::from_vec(rows, cols, values)?,
        });
    }
    if pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(ModelParams { tensors })
}
