//! Reverse-mode automatic differentiation over dense tensors and fixed
//! sparse operators.
//!
//! A [`Tape`] records every operation in topological order during the
//! forward pass; [`Tape::backward`] replays the records in exact reverse
//! order and accumulates gradients into the trainable leaves. Tapes are
//! single-owner values: one tape per training step, never shared.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::{EdgeIndex, SparseOperator};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// alpha = 1
    Elu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }
}

enum Op {
    Leaf { trainable: bool },
    Matmul { a: NodeId, b: NodeId },
    Spmm { op: Arc<SparseOperator>, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddRowBias { x: NodeId, bias: NodeId },
    Activation { x: NodeId, kind: Activation },
    Dropout { x: NodeId, mask: Vec<f64> },
    LogSoftmaxRows { x: NodeId },
    MaskedNll { logp: NodeId, labels: Arc<Vec<usize>>, mask: Arc<Vec<usize>> },
    SegmentSoftmax { scores: NodeId, edges: Arc<EdgeIndex> },
    EdgeGatherSum { u: NodeId, v: NodeId, edges: Arc<EdgeIndex> },
    EdgeAggregate { weights: NodeId, feats: NodeId, edges: Arc<EdgeIndex> },
    ConcatCols { parts: Vec<NodeId> },
    SumAll { x: NodeId },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Non-trainable leaf (features, constants).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    /// Trainable leaf; [`backward`](Tape::backward) reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Matmul { a, b }, requires))
    }

    /// out = op @ x with fixed weights; only x receives gradient.
    pub fn spmm(&mut self, op: &Arc<SparseOperator>, x: NodeId) -> Result<NodeId> {
        let value = op.matmul_dense(&self.values[x.0])?;
        let requires = self.req(x);
        Ok(self.push(value, Op::Spmm { op: Arc::clone(op), x }, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if !ta.same_shape(tb) {
            return Err(Error::shape("add", ta.shape_string(), tb.shape_string()));
        }
        let mut value = ta.clone();
        value.add_assign(tb)?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add { a, b }, requires))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if !ta.same_shape(tb) {
            return Err(Error::shape("mul", ta.shape_string(), tb.shape_string()));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), values)?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul { a, b }, requires))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.values[x.0].map(|v| v * factor);
        let requires = self.req(x);
        self.push(value, Op::Scale { x, factor }, requires)
    }

    /// Adds a 1xC bias row to every row of x.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape(
                "add_row_bias",
                tx.shape_string(),
                tb.shape_string(),
            ));
        }
        let mut value = tx.clone();
        let b = tb.values().to_vec();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for (r, bv) in row.iter_mut().zip(&b) {
                *r += bv;
            }
        }
        let requires = self.req(x) || self.req(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, requires))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = self.values[x.0].map(|v| kind.apply(v));
        let requires = self.req(x);
        self.push(value, Op::Activation { x, kind }, requires)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability p and survivors are scaled by 1/(1-p); eval mode is the
    /// identity. The mask is drawn only for nonzero entries — an entry that
    /// is already zero stays zero either way, and the models only ever feed
    /// dropout from non-trainable leaves or from activations whose
    /// subgradient vanishes wherever the output is exactly zero.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter {
                name: "dropout_p",
                reason: format!("{p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let tx = &self.values[x.0];
        let keep_scale = 1.0 / (1.0 - p);
        let mut mask = vec![0.0; tx.len()];
        let mut values = vec![0.0; tx.len()];
        for (i, &v) in tx.values().iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let m = if rng.gen::<f64>() < p { 0.0 } else { keep_scale };
            mask[i] = m;
            values[i] = v * m;
        }
        let value = Tensor::from_vec(tx.rows(), tx.cols(), values)?;
        let requires = self.req(x);
        Ok(self.push(value, Op::Dropout { x, mask }, requires))
    }

    /// Row-wise log-softmax, computed against the row maximum so that large
    /// magnitudes cannot overflow.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = &self.values[x.0];
        let mut value = tx.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for v in row.iter_mut() {
                *v -= log_z;
            }
        }
        let requires = self.req(x);
        self.push(value, Op::LogSoftmaxRows { x }, requires)
    }

    /// Mean negative log-likelihood over the masked rows. Gradient flows
    /// only into those rows.
    pub fn masked_nll(
        &mut self,
        logp: NodeId,
        labels: &Arc<Vec<usize>>,
        mask: &Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        let t = &self.values[logp.0];
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut total = 0.0;
        for &i in mask.iter() {
            if i >= t.rows() {
                return Err(Error::NodeOutOfRange {
                    id: i,
                    num_nodes: t.rows(),
                });
            }
            let label = labels[i];
            if label >= t.cols() {
                return Err(Error::LabelOutOfRange {
                    node: i,
                    label,
                    num_classes: t.cols(),
                });
            }
            total -= t.get(i, label);
        }
        let value = Tensor::scalar(total / mask.len() as f64);
        let requires = self.req(logp);
        Ok(self.push(
            value,
            Op::MaskedNll {
                logp,
                labels: Arc::clone(labels),
                mask: Arc::clone(mask),
            },
            requires,
        ))
    }

    /// Softmax over each destination segment of `edges`. `scores` is Ex1.
    pub fn segment_softmax(&mut self, scores: NodeId, edges: &Arc<EdgeIndex>) -> Result<NodeId> {
        let t = &self.values[scores.0];
        if t.rows() != edges.num_edges() || t.cols() != 1 {
            return Err(Error::shape(
                "segment_softmax",
                format!("{}x1 edge scores", edges.num_edges()),
                t.shape_string(),
            ));
        }
        let mut out = t.values().to_vec();
        for (lo, hi) in edges.segments() {
            if lo == hi {
                continue;
            }
            let seg = &mut out[lo..hi];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in seg.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(t.rows(), 1, out)?;
        let requires = self.req(scores);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                scores,
                edges: Arc::clone(edges),
            },
            requires,
        ))
    }

    /// Per-edge score pieces: out[e] = u[dst(e)] + v[src(e)], u and v Nx1.
    pub fn edge_gather_sum(
        &mut self,
        u: NodeId,
        v: NodeId,
        edges: &Arc<EdgeIndex>,
    ) -> Result<NodeId> {
        let (tu, tv) = (&self.values[u.0], &self.values[v.0]);
        let n = edges.num_nodes();
        if tu.shape() != (n, 1) || tv.shape() != (n, 1) {
            return Err(Error::shape(
                "edge_gather_sum",
                format!("{}x1 node scores", n),
                format!("{} and {}", tu.shape_string(), tv.shape_string()),
            ));
        }
        let mut out = Vec::with_capacity(edges.num_edges());
        for e in 0..edges.num_edges() {
            out.push(tu.values()[edges.dst()[e]] + tv.values()[edges.src()[e]]);
        }
        let value = Tensor::from_vec(edges.num_edges(), 1, out)?;
        let requires = self.req(u) || self.req(v);
        Ok(self.push(
            value,
            Op::EdgeGatherSum {
                u,
                v,
                edges: Arc::clone(edges),
            },
            requires,
        ))
    }

    /// Weighted neighborhood aggregation:
    /// out[i] = sum over incoming edges e of weights[e] * feats[src(e)].
    pub fn edge_aggregate(
        &mut self,
        weights: NodeId,
        feats: NodeId,
        edges: &Arc<EdgeIndex>,
    ) -> Result<NodeId> {
        let (tw, th) = (&self.values[weights.0], &self.values[feats.0]);
        if tw.shape() != (edges.num_edges(), 1) {
            return Err(Error::shape(
                "edge_aggregate",
                format!("{}x1 edge weights", edges.num_edges()),
                tw.shape_string(),
            ));
        }
        if th.rows() != edges.num_nodes() {
            return Err(Error::shape(
                "edge_aggregate",
                format!("{} node rows", edges.num_nodes()),
                th.shape_string(),
            ));
        }
        let d = th.cols();
        let mut out = Tensor::zeros(edges.num_nodes(), d);
        for e in 0..edges.num_edges() {
            let w = tw.values()[e];
            let src_row = th.row(edges.src()[e]);
            let out_row = out.row_mut(edges.dst()[e]);
            for k in 0..d {
                out_row[k] += w * src_row[k];
            }
        }
        let requires = self.req(weights) || self.req(feats);
        Ok(self.push(
            out,
            Op::EdgeAggregate {
                weights,
                feats,
                edges: Arc::clone(edges),
            },
            requires,
        ))
    }

    /// Concatenates tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter {
                name: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let rows = self.values[parts[0].0].rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = &self.values[p.0];
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{rows} rows"),
                    t.shape_string(),
                ));
            }
            total_cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.values[p.0];
            let c = t.cols();
            for i in 0..rows {
                out.row_mut(i)[offset..offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let requires = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            requires,
        ))
    }

    /// Scalar sum of all entries.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.values[x.0].sum());
        let requires = self.req(x);
        self.push(value, Op::SumAll { x }, requires)
    }

    /// Reverse sweep from a scalar loss. Returns gradients for trainable
    /// leaves; non-parameter leaves are skipped, as are whole subgraphs with
    /// no trainable ancestor.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_t = &self.values[loss.0];
        if !loss_t.is_scalar() {
            return Err(Error::NonScalarLoss {
                rows: loss_t.rows(),
                cols: loss_t.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.ops[id], Op::Leaf { .. }) {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads)?;
        }

        // Drop anything accumulated into non-trainable leaves along the way.
        for id in 0..grads.len() {
            if !matches!(self.ops[id], Op::Leaf { trainable: true }) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| -> Result<()> {
            match &mut grads[target.0] {
                Some(t) => t.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.ops[id] {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                if self.req(*a) {
                    acc(grads, *a, g.matmul_nt(&self.values[b.0])?)?;
                }
                if self.req(*b) {
                    acc(grads, *b, self.values[a.0].matmul_tn(g)?)?;
                }
            }
            Op::Spmm { op, x } => {
                if self.req(*x) {
                    acc(grads, *x, op.transpose_matmul_dense(g)?)?;
                }
            }
            Op::Add { a, b } => {
                if self.req(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if self.req(*b) {
                    acc(grads, *b, g.clone())?;
                }
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let mut d = g.clone();
                    for (dv, bv) in d.values_mut().iter_mut().zip(self.values[b.0].values()) {
                        *dv *= bv;
                    }
                    acc(grads, *a, d)?;
                }
                if self.req(*b) {
                    let mut d = g.clone();
                    for (dv, av) in d.values_mut().iter_mut().zip(self.values[a.0].values()) {
                        *dv *= av;
                    }
                    acc(grads, *b, d)?;
                }
            }
            Op::Scale { x, factor } => {
                if self.req(*x) {
                    acc(grads, *x, g.map(|v| v * factor))?;
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.req(*x) {
                    acc(grads, *x, g.clone())?;
                }
                if self.req(*bias) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        let row = g.row(i);
                        let drow = d.row_mut(0);
                        for (dv, gv) in drow.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    acc(grads, *bias, d)?;
                }
            }
            Op::Activation { x, kind } => {
                if self.req(*x) {
                    let input = &self.values[*&x.0];
                    let output = &self.values[id];
                    let mut d = g.clone();
                    match kind {
                        Activation::Relu => {
                            for (dv, &xv) in d.values_mut().iter_mut().zip(input.values()) {
                                if xv <= 0.0 {
                                    *dv = 0.0;
                                }
                            }
                        }
                        Activation::Elu => {
                            // d/dx elu(x) = 1 for x > 0, exp(x) = out + 1 otherwise
                            for ((dv, &xv), &yv) in d
                                .values_mut()
                                .iter_mut()
                                .zip(input.values())
                                .zip(output.values())
                            {
                                if xv <= 0.0 {
                                    *dv *= yv + 1.0;
                                }
                            }
                        }
                        Activation::LeakyRelu(slope) => {
                            for (dv, &xv) in d.values_mut().iter_mut().zip(input.values()) {
                                if xv <= 0.0 {
                                    *dv *= slope;
                                }
                            }
                        }
                    }
                    acc(grads, *x, d)?;
                }
            }
            Op::Dropout { x, mask } => {
                if self.req(*x) {
                    let mut d = g.clone();
                    for (dv, m) in d.values_mut().iter_mut().zip(mask) {
                        *dv *= m;
                    }
                    acc(grads, *x, d)?;
                }
            }
            Op::LogSoftmaxRows { x } => {
                if self.req(*x) {
                    let out = &self.values[id];
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let gsum: f64 = g.row(i).iter().sum();
                        let drow = d.row_mut(i);
                        let orow = out.row(i);
                        for (dv, &ov) in drow.iter_mut().zip(orow) {
                            *dv -= ov.exp() * gsum;
                        }
                    }
                    acc(grads, *x, d)?;
                }
            }
            Op::MaskedNll { logp, labels, mask } => {
                if self.req(*logp) {
                    let t = &self.values[logp.0];
                    let gs = g.scalar_value()?;
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    let scale = gs / mask.len() as f64;
                    for &i in mask.iter() {
                        let cur = d.get(i, labels[i]);
                        d.set(i, labels[i], cur - scale);
                    }
                    acc(grads, *logp, d)?;
                }
            }
            Op::SegmentSoftmax { scores, edges } => {
                if self.req(*scores) {
                    let out = &self.values[id];
                    let mut d = vec![0.0; out.len()];
                    for (lo, hi) in edges.segments() {
                        if lo == hi {
                            continue;
                        }
                        let mut dot = 0.0;
                        for e in lo..hi {
                            dot += g.values()[e] * out.values()[e];
                        }
                        for e in lo..hi {
                            d[e] = out.values()[e] * (g.values()[e] - dot);
                        }
                    }
                    acc(grads, *scores, Tensor::from_vec(out.rows(), 1, d)?)?;
                }
            }
            Op::EdgeGatherSum { u, v, edges } => {
                let n = edges.num_nodes();
                if self.req(*u) {
                    let mut d = Tensor::zeros(n, 1);
                    for e in 0..edges.num_edges() {
                        d.values_mut()[edges.dst()[e]] += g.values()[e];
                    }
                    acc(grads, *u, d)?;
                }
                if self.req(*v) {
                    let mut d = Tensor::zeros(n, 1);
                    for e in 0..edges.num_edges() {
                        d.values_mut()[edges.src()[e]] += g.values()[e];
                    }
                    acc(grads, *v, d)?;
                }
            }
            Op::EdgeAggregate { weights, feats, edges } => {
                let th = &self.values[feats.0];
                let tw = &self.values[weights.0];
                let d_feats = th.cols();
                if self.req(*weights) {
                    let mut d = Tensor::zeros(edges.num_edges(), 1);
                    for e in 0..edges.num_edges() {
                        let g_row = g.row(edges.dst()[e]);
                        let h_row = th.row(edges.src()[e]);
                        let mut dot = 0.0;
                        for k in 0..d_feats {
                            dot += g_row[k] * h_row[k];
                        }
                        d.values_mut()[e] = dot;
                    }
                    acc(grads, *weights, d)?;
                }
                if self.req(*feats) {
                    let mut d = Tensor::zeros(th.rows(), d_feats);
                    for e in 0..edges.num_edges() {
                        let w = tw.values()[e];
                        let g_row = g.row(edges.dst()[e]).to_vec();
                        let d_row = d.row_mut(edges.src()[e]);
                        for k in 0..d_feats {
                            d_row[k] += w * g_row[k];
                        }
                    }
                    acc(grads, *feats, d)?;
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.values[p.0].cols();
                    if self.req(p) {
                        let mut d = Tensor::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        acc(grads, p, d)?;
                    }
                    offset += c;
                }
            }
            Op::SumAll { x } => {
                if self.req(*x) {
                    let t = &self.values[x.0];
                    let gs = g.scalar_value()?;
                    acc(grads, *x, Tensor::filled(t.rows(), t.cols(), gs))?;
                }
            }
        }
        Ok(())
    }
}

/// Gradients reported by [`Tape::backward`], keyed by trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite differences of a scalar-valued function of a flat
    /// parameter vector. Independent of the tape.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut probe = at.to_vec();
        for i in 0..at.len() {
            probe[i] = at[i] + h;
            let up = f(&probe);
            probe[i] = at[i] - h;
            let down = f(&probe);
            probe[i] = at[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_close(actual: &[f64], expect: &[f64], tol: f64, what: &str) {
        assert_eq!(actual.len(), expect.len(), "{what}: length");
        for (i, (&a, &e)) in actual.iter().zip(expect).enumerate() {
            let denom = a.abs().max(e.abs()).max(1.0);
            assert!(
                ((a - e) / denom).abs() < tol,
                "{what}[{i}]: {a} vs {e}"
            );
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // d sum(A @ B) / dA at A = I, B = [[2,3],[4,5]]; frozen from the
        // finite-difference oracle below, which yields [[5,9],[5,9]].
        let a0 = [1.0, 0.0, 0.0, 1.0];
        let b = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let f = |a: &[f64]| {
            let mut tape = Tape::new();
            let av = tape.param(Tensor::from_vec(2, 2, a.to_vec()).unwrap());
            let bv = tape.input(b.clone());
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.sum_all(c);
            tape.value(s).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &a0, 1e-6);
        assert_close(&fd, &[5.0, 9.0, 5.0, 9.0], 1e-7, "fd oracle");

        let mut tape = Tape::new();
        let av = tape.param(Tensor::from_vec(2, 2, a0.to_vec()).unwrap());
        let bv = tape.input(b);
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum_all(c);
        let grads = tape.backward(s).unwrap();
        assert_close(grads.wrt(av).unwrap().values(), &fd, 1e-6, "matmul dA");
    }

    #[test]
    fn matmul_second_operand_gradient() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let b0 = [0.3, -0.7, 1.1, 0.2];
        let f = |bv: &[f64]| {
            let mut tape = Tape::new();
            let an = tape.input(a.clone());
            let bn = tape.param(Tensor::from_vec(2, 2, bv.to_vec()).unwrap());
            let c = tape.matmul(an, bn).unwrap();
            let s = tape.sum_all(c);
            tape.value(s).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &b0, 1e-6);

        let mut tape = Tape::new();
        let an = tape.input(a.clone());
        let bn = tape.param(Tensor::from_vec(2, 2, b0.to_vec()).unwrap());
        let c = tape.matmul(an, bn).unwrap();
        let s = tape.sum_all(c);
        let grads = tape.backward(s).unwrap();
        assert_close(grads.wrt(bn).unwrap().values(), &fd, 1e-6, "matmul dB");
    }

    #[test]
    fn spmm_gradient_is_transpose_column_structure() {
        // sum(S @ X) gradient w.r.t. X: finite differences against the
        // analytic path; equals column sums of S^T replicated per feature.
        let s = Arc::new(
            SparseOperator::from_triplets(3, 3, &[(0, 1, 2.0), (1, 0, 0.5), (2, 2, 1.5)]).unwrap(),
        );
        let x0 = [0.1, -0.4, 0.9, 0.7, 0.2, -0.3];
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.param(Tensor::from_vec(3, 2, x.to_vec()).unwrap());
            let y = tape.spmm(&s, xn).unwrap();
            let l = tape.sum_all(y);
            tape.value(l).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &x0, 1e-6);

        let mut tape = Tape::new();
        let xn = tape.param(Tensor::from_vec(3, 2, x0.to_vec()).unwrap());
        let y = tape.spmm(&s, xn).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(xn).unwrap().values(), &fd, 1e-6, "spmm dX");
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);

        let e = tape.input(Tensor::scalar(-1.0));
        let ev = tape.activation(e, Activation::Elu);
        let expect = (-1.0f64).exp() - 1.0;
        assert!((tape.value(ev).values()[0] - expect).abs() < 1e-15);

        let l = tape.input(Tensor::scalar(-2.0));
        let lv = tape.activation(l, Activation::LeakyRelu(0.2));
        assert!((tape.value(lv).values()[0] - (-0.4)).abs() < 1e-15);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // Points kept away from the kink at zero.
        let x0 = [-1.3, -0.4, 0.6, 2.1];
        for kind in [Activation::Relu, Activation::Elu, Activation::LeakyRelu(0.2)] {
            let f = |x: &[f64]| {
                let mut tape = Tape::new();
                let xn = tape.param(Tensor::from_vec(1, 4, x.to_vec()).unwrap());
                let y = tape.activation(xn, kind);
                let ysq = tape.mul(y, y).unwrap();
                let l = tape.sum_all(ysq);
                tape.value(l).scalar_value().unwrap()
            };
            let fd = numeric_grad(f, &x0, 1e-6);
            let mut tape = Tape::new();
            let xn = tape.param(Tensor::from_vec(1, 4, x0.to_vec()).unwrap());
            let y = tape.activation(xn, kind);
            let ysq = tape.mul(y, y).unwrap();
            let l = tape.sum_all(ysq);
            let grads = tape.backward(l).unwrap();
            assert_close(
                grads.wrt(xn).unwrap().values(),
                &fd,
                1e-5,
                &format!("{kind:?}"),
            );
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.dropout(x, 0.5, false, &mut rng(0)).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.0, true, &mut rng(0)).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        assert!(tape.dropout(x, 1.0, true, &mut rng(0)).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng(0)).is_err());
    }

    #[test]
    fn dropout_survivor_mean_is_near_one() {
        // Monte-Carlo expectation: E[mask * 1] = 1 under inverted scaling.
        let n = 100_000;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(1, n, 1.0));
        let y = tape.dropout(x, 0.5, true, &mut rng(7)).unwrap();
        let mean = tape.value(y).sum() / n as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_backward_applies_same_mask() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(1, 64, 2.0));
        let y = tape.dropout(x, 0.5, true, &mut rng(3)).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        let g = grads.wrt(x).unwrap();
        // gradient of sum is exactly the mask
        for (gv, yv) in g.values().iter().zip(tape.value(y).values()) {
            assert_eq!(gv * 2.0, *yv);
        }
    }

    #[test]
    fn log_softmax_known_rows() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = tape.log_softmax_rows(x);
        let ln2 = 2.0f64.ln();
        assert_close(tape.value(y).values(), &[-ln2, -ln2], 1e-12, "[0,0]");

        let x3 = tape.input(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
        let y3 = tape.log_softmax_rows(x3);
        let ln3 = 3.0f64.ln();
        assert_close(tape.value(y3).values(), &[-ln3, -ln3, -ln3], 1e-12, "[1,1,1]");
    }

    #[test]
    fn log_softmax_large_magnitudes_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = tape.log_softmax_rows(x);
        let out = tape.value(y);
        assert!(out.all_finite());
        // shifted direct computation: subtract the max by hand first
        let z: f64 = (0.0f64).exp() + (-1000.0f64).exp();
        let expect = [0.0 - z.ln(), -1000.0 - z.ln()];
        assert_close(out.values(), &expect, 1e-12, "shifted");
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let x0 = [0.3, -1.2, 0.8, 0.1, 0.0, -0.5];
        let labels = Arc::new(vec![2usize, 0]);
        let mask = Arc::new(vec![0usize, 1]);
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.param(Tensor::from_vec(2, 3, x.to_vec()).unwrap());
            let y = tape.log_softmax_rows(xn);
            let l = tape.masked_nll(y, &labels, &mask).unwrap();
            tape.value(l).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &x0, 1e-6);
        let mut tape = Tape::new();
        let xn = tape.param(Tensor::from_vec(2, 3, x0.to_vec()).unwrap());
        let y = tape.log_softmax_rows(xn);
        let l = tape.masked_nll(y, &labels, &mask).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(xn).unwrap().values(), &fd, 1e-5, "nll chain");
    }

    #[test]
    fn masked_nll_values() {
        // perfect one-hot log-probabilities: picked entries are exactly 0
        let mut tape = Tape::new();
        let perfect = tape.input(
            Tensor::from_rows(&[vec![0.0, -50.0], vec![-50.0, 0.0]]).unwrap(),
        );
        let labels = Arc::new(vec![0usize, 1]);
        let mask = Arc::new(vec![0usize, 1]);
        let l = tape.masked_nll(perfect, &labels, &mask).unwrap();
        assert_eq!(tape.value(l).scalar_value().unwrap(), 0.0);

        // uniform over 7 classes
        let ln7 = 7.0f64.ln();
        let uniform = tape.input(Tensor::filled(3, 7, -ln7));
        let labels7 = Arc::new(vec![0usize, 3, 6]);
        let mask7 = Arc::new(vec![0usize, 2]);
        let l7 = tape.masked_nll(uniform, &labels7, &mask7).unwrap();
        assert!((tape.value(l7).scalar_value().unwrap() - ln7).abs() < 1e-12);

        // two masked rows: mean of the two picked entries, sign flipped
        let hand = tape.input(Tensor::from_rows(&[vec![-0.3, -2.0], vec![-1.5, -0.1]]).unwrap());
        let labels_h = Arc::new(vec![1usize, 0]);
        let mask_h = Arc::new(vec![0usize, 1]);
        let lh = tape.masked_nll(hand, &labels_h, &mask_h).unwrap();
        let oracle = -(-2.0 + -1.5) / 2.0;
        assert!((tape.value(lh).scalar_value().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn masked_nll_error_paths() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(2, 3));
        let labels = Arc::new(vec![0usize, 5]);
        let empty: Arc<Vec<usize>> = Arc::new(vec![]);
        assert!(matches!(
            tape.masked_nll(x, &labels, &empty),
            Err(Error::EmptyMask)
        ));
        let mask = Arc::new(vec![1usize]);
        assert!(matches!(
            tape.masked_nll(x, &labels, &mask),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn segment_softmax_known_segments() {
        // nodes: 0 has one incoming edge, 1 has three, 2 has two
        let edges = Arc::new(
            EdgeIndex::new(
                3,
                vec![(0, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 2)],
            )
            .unwrap(),
        );
        let mut tape = Tape::new();
        let scores = tape.input(
            Tensor::from_vec(6, 1, vec![3.7, 0.0, 0.0, 0.0, 1.0, 2.0]).unwrap(),
        );
        let y = tape.segment_softmax(scores, &edges).unwrap();
        let out = tape.value(y).values();
        assert!((out[0] - 1.0).abs() < 1e-12, "single-edge segment is 1");
        for v in &out[1..4] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // [1,2] -> [1/(1+e), e/(1+e)]
        let e = 1.0f64.exp();
        assert!((out[4] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((out[5] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_gradient_matches_finite_differences() {
        let edges = Arc::new(EdgeIndex::new(2, vec![(0, 0), (1, 0), (0, 1), (1, 1)]).unwrap());
        let s0 = [0.4, -0.2, 1.1, 0.3];
        // weight the outputs to give each coordinate a distinct pull
        let w = Tensor::from_vec(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let f = |s: &[f64]| {
            let mut tape = Tape::new();
            let sn = tape.param(Tensor::from_vec(4, 1, s.to_vec()).unwrap());
            let a = tape.segment_softmax(sn, &edges).unwrap();
            let wn = tape.input(w.clone());
            let aw = tape.mul(a, wn).unwrap();
            let l = tape.sum_all(aw);
            tape.value(l).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &s0, 1e-6);
        let mut tape = Tape::new();
        let sn = tape.param(Tensor::from_vec(4, 1, s0.to_vec()).unwrap());
        let a = tape.segment_softmax(sn, &edges).unwrap();
        let wn = tape.input(w.clone());
        let aw = tape.mul(a, wn).unwrap();
        let l = tape.sum_all(aw);
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(sn).unwrap().values(), &fd, 1e-5, "segment softmax");
    }

    #[test]
    fn edge_ops_gradients_match_finite_differences() {
        let edges = Arc::new(EdgeIndex::new(3, vec![(0, 0), (1, 0), (2, 1), (1, 2)]).unwrap());
        // edge_gather_sum w.r.t. u and v jointly
        let uv0 = [0.2, -0.5, 0.9, 1.0, 0.3, -0.2];
        let f = |uv: &[f64]| {
            let mut tape = Tape::new();
            let u = tape.param(Tensor::from_vec(3, 1, uv[..3].to_vec()).unwrap());
            let v = tape.param(Tensor::from_vec(3, 1, uv[3..].to_vec()).unwrap());
            let s = tape.edge_gather_sum(u, v, &edges).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let l = tape.sum_all(sq);
            tape.value(l).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &uv0, 1e-6);
        let mut tape = Tape::new();
        let u = tape.param(Tensor::from_vec(3, 1, uv0[..3].to_vec()).unwrap());
        let v = tape.param(Tensor::from_vec(3, 1, uv0[3..].to_vec()).unwrap());
        let s = tape.edge_gather_sum(u, v, &edges).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let l = tape.sum_all(sq);
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(u).unwrap().values(), &fd[..3], 1e-5, "du");
        assert_close(grads.wrt(v).unwrap().values(), &fd[3..], 1e-5, "dv");

        // edge_aggregate w.r.t. weights and features jointly
        let wh0 = [0.5, -0.3, 0.8, 0.1, 0.4, -0.6, 0.2, 0.9, -0.1, 0.7];
        let g = |wh: &[f64]| {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::from_vec(4, 1, wh[..4].to_vec()).unwrap());
            let h = tape.param(Tensor::from_vec(3, 2, wh[4..].to_vec()).unwrap());
            let out = tape.edge_aggregate(w, h, &edges).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let l = tape.sum_all(sq);
            tape.value(l).scalar_value().unwrap()
        };
        let fd2 = numeric_grad(g, &wh0, 1e-6);
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(4, 1, wh0[..4].to_vec()).unwrap());
        let h = tape.param(Tensor::from_vec(3, 2, wh0[4..].to_vec()).unwrap());
        let out = tape.edge_aggregate(w, h, &edges).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let l = tape.sum_all(sq);
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(w).unwrap().values(), &fd2[..4], 1e-5, "dw");
        assert_close(grads.wrt(h).unwrap().values(), &fd2[4..], 1e-5, "dh");
    }

    #[test]
    fn concat_and_bias_gradients() {
        let x0 = [0.1, 0.2, 0.3, 0.4, 10.0, 20.0];
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::from_vec(2, 1, x[..2].to_vec()).unwrap());
            let b = tape.param(Tensor::from_vec(2, 1, x[2..4].to_vec()).unwrap());
            let bias = tape.param(Tensor::from_vec(1, 2, x[4..].to_vec()).unwrap());
            let c = tape.concat_cols(&[a, b]).unwrap();
            let cb = tape.add_row_bias(c, bias).unwrap();
            let sq = tape.mul(cb, cb).unwrap();
            let l = tape.sum_all(sq);
            tape.value(l).scalar_value().unwrap()
        };
        let fd = numeric_grad(f, &x0, 1e-6);
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(2, 1, x0[..2].to_vec()).unwrap());
        let b = tape.param(Tensor::from_vec(2, 1, x0[2..4].to_vec()).unwrap());
        let bias = tape.param(Tensor::from_vec(1, 2, x0[4..].to_vec()).unwrap());
        let c = tape.concat_cols(&[a, b]).unwrap();
        let cb = tape.add_row_bias(c, bias).unwrap();
        let sq = tape.mul(cb, cb).unwrap();
        let l = tape.sum_all(sq);
        let grads = tape.backward(l).unwrap();
        assert_close(grads.wrt(a).unwrap().values(), &fd[..2], 1e-5, "concat a");
        assert_close(grads.wrt(b).unwrap().values(), &fd[2..4], 1e-5, "concat b");
        assert_close(grads.wrt(bias).unwrap().values(), &fd[4..], 1e-5, "bias");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap());
        let l = tape.sum_all(w);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().values(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_is_value() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let half = tape.scale(sq, 0.5);
        let l = tape.sum_all(half);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().values(), &[3.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_parameter_leaves_are_skipped() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, w).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(w).unwrap().values(), &[2.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let build = || {
            let mut r = rng(42);
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 / 7.0).collect()).unwrap());
            let w = tape.param(Tensor::from_vec(3, 2, (0..6).map(|i| 0.3 - i as f64 / 11.0).collect()).unwrap());
            let xd = tape.dropout(x, 0.5, true, &mut r).unwrap();
            let h = tape.matmul(xd, w).unwrap();
            let a = tape.activation(h, Activation::Relu);
            let y = tape.log_softmax_rows(a);
            let labels = Arc::new(vec![0usize, 1, 0, 1]);
            let mask = Arc::new(vec![0usize, 2, 3]);
            let l = tape.masked_nll(y, &labels, &mask).unwrap();
            let loss = tape.value(l).scalar_value().unwrap();
            let grads = tape.backward(l).unwrap();
            (loss, grads.wrt(w).unwrap().values().to_vec())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        let bits1: Vec<u64> = g1.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
}
