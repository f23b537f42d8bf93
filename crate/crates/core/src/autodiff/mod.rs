//! Reverse-mode differentiation over matrix expressions.
//!
//! An [`ExprGraph`] is an append-only list of primitive applications whose
//! operands always precede them, so the list order is a topological order and
//! the last node is the root. Leaves are named and bound at evaluation time.
//!
//! All graph values are 2-D; vectors are `1 x n` rows.

mod check;
pub mod random;

pub use check::{check_gradient, check_gradient_detailed, GradCheck};

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::linalg::{self, PrecisionScheme};
use crate::quant::{self, GroupScale, GroupStats, QuantConfig};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf { name: String, trainable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Matrix plus a `1 x cols` row broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Inverse(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Softmax {
        x: NodeId,
        causal: bool,
    },
    Relu(NodeId),
    Gelu(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Cast(NodeId, Precision),
    /// Straight-through fake quantization; optional clip leaves hold the raw
    /// (pre-sigmoid) lower and upper clip scalars, one per group. With
    /// `stats_grad` the step size also passes gradient back to the elements
    /// that set each group's min and max.
    FakeQuant {
        x: NodeId,
        config: QuantConfig,
        clip: Option<(NodeId, NodeId)>,
        stats_grad: bool,
    },
    FrobeniusSq(NodeId),
    Sum(NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | AddRow(a, b) => vec![*a, *b],
            Scale(x, _) | Transpose(x) | Inverse(x) | Relu(x) | Gelu(x) | Cast(x, _)
            | FrobeniusSq(x) | Sum(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Softmax { x, .. } | SliceCols { x, .. } => vec![*x],
            ConcatCols(xs) => xs.clone(),
            FakeQuant { x, clip, .. } => match clip {
                Some((lo, hi)) => vec![*x, *lo, *hi],
                None => vec![*x],
            },
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

/// Named leaf values.
pub type Bindings = HashMap<String, Tensor>;

/// Gradients of trainable leaves, keyed by leaf name.
pub type GradientMap = BTreeMap<String, Tensor>;

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            other => other.operands().iter().any(|o| self.nodes[o.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            trainable,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf (inputs, frozen weights, masks, targets).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable leaf; [`ExprGraph::backward`] reports its gradient.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(x, row))
    }
    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(x, s))
    }
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }
    pub fn inverse(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Inverse(x))
    }
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        self.push(Op::Softmax { x, causal })
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }
    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(xs))
    }
    pub fn cast(&mut self, x: NodeId, p: Precision) -> NodeId {
        self.push(Op::Cast(x, p))
    }
    /// Fake quantization with the group statistics treated as constants.
    pub fn fake_quant(&mut self, x: NodeId, config: QuantConfig, clip: Option<(NodeId, NodeId)>) -> NodeId {
        self.push(Op::FakeQuant { x, config, clip, stats_grad: false })
    }
    /// Fake quantization that also differentiates through the min/max
    /// statistics, so rescaling the input is seen by the step size.
    pub fn fake_quant_minmax(&mut self, x: NodeId, config: QuantConfig, clip: Option<(NodeId, NodeId)>) -> NodeId {
        self.push(Op::FakeQuant { x, config, clip, stats_grad: true })
    }
    pub fn frobenius_sq(&mut self, x: NodeId) -> NodeId {
        self.push(Op::FrobeniusSq(x))
    }
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    /// Evaluates every node with straight-through fake quantization.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation> {
        self.evaluate(bindings, None)
    }

    /// Evaluates with every fake-quant node replaced by its straight-through
    /// surrogate: group statistics and rounding residuals are frozen at their
    /// values in `base`, so the surrogate is smooth inside the clamp range and
    /// its derivative is exactly the straight-through gradient.
    pub fn forward_surrogate(&self, bindings: &Bindings, base: &Evaluation) -> Result<Evaluation> {
        self.evaluate(bindings, Some(base))
    }

    fn evaluate(&self, bindings: &Bindings, frozen: Option<&Evaluation>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = |id: &NodeId| &values[id.0];
            let (value, extra) = match &node.op {
                Op::Leaf { name, .. } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                    (as_matrix(t), Aux::None)
                }
                Op::MatMul(a, b) => (linalg::matmul(v(a), v(b))?, Aux::None),
                Op::Add(a, b) => (same_precision(v(a), v(b))?.add(v(b))?, Aux::None),
                Op::Sub(a, b) => (same_precision(v(a), v(b))?.sub(v(b))?, Aux::None),
                Op::Hadamard(a, b) => (same_precision(v(a), v(b))?.hadamard(v(b))?, Aux::None),
                Op::AddRow(x, r) => (add_row(v(x), v(r))?, Aux::None),
                Op::Scale(x, s) => (v(x).scale(*s), Aux::None),
                Op::Transpose(x) => (v(x).transpose(), Aux::None),
                Op::Inverse(x) => {
                    let scheme = match v(x).precision() {
                        Precision::Double => PrecisionScheme::Double,
                        Precision::Single => PrecisionScheme::Float,
                    };
                    (linalg::invert(v(x), scheme)?.0, Aux::None)
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (y, xhat, rstd) = layer_norm(v(x), v(gamma), v(beta), *eps)?;
                    (y, Aux::LayerNorm { xhat, rstd })
                }
                Op::Softmax { x, causal } => (softmax(v(x), *causal), Aux::None),
                Op::Relu(x) => (v(x).map(|a| a.max(0.0)), Aux::None),
                Op::Gelu(x) => (v(x).map(gelu), Aux::None),
                Op::SliceCols { x, start, len } => (slice_cols(v(x), *start, *len)?, Aux::None),
                Op::ConcatCols(xs) => {
                    let parts: Vec<&Tensor> = xs.iter().map(v).collect();
                    (concat_cols(&parts)?, Aux::None)
                }
                Op::Cast(x, p) => (v(x).to_precision(*p), Aux::None),
                Op::FakeQuant { x, config, clip, stats_grad } => {
                    let clips = clip.map(|(lo, hi)| (v(&lo), v(&hi)));
                    let frozen_cache = frozen.map(|f| match &f.aux[idx] {
                        Aux::FakeQuant(c) => &**c,
                        _ => unreachable!("surrogate base evaluated a different graph"),
                    });
                    let (y, cache) = fake_quant_forward(v(x), config, clips, frozen_cache, *stats_grad)?;
                    (y, Aux::FakeQuant(Box::new(cache)))
                }
                Op::FrobeniusSq(x) => (
                    Tensor::from_parts(vec![1, 1], vec![linalg::frobenius_norm_sq(v(x))], Precision::Double),
                    Aux::None,
                ),
                Op::Sum(x) => (
                    Tensor::from_parts(vec![1, 1], vec![v(x).sum()], Precision::Double),
                    Aux::None,
                ),
            };
            values.push(value);
            aux.push(extra);
        }
        Ok(Evaluation { values, aux })
    }

    /// Reverse pass from the root. The root must be `1 x 1`.
    pub fn backward(&self, eval: &Evaluation) -> Result<Gradients> {
        let root = self.root().ok_or_else(|| Error::NonScalarRoot(vec![]))?;
        let root_val = &eval.values[root.0];
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_parts(vec![1, 1], vec![1.0], root_val.precision()));

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            let val = |id: &NodeId| &eval.values[id.0];
            let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
            let mut contribs: Vec<(NodeId, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        contribs.push((*a, linalg::matmul(&g, &val(b).transpose())?));
                    }
                    if needs(b) {
                        contribs.push((*b, linalg::matmul(&val(a).transpose(), &g)?));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.scale(-1.0)));
                    contribs.push((*a, g));
                }
                Op::Hadamard(a, b) => {
                    if needs(a) {
                        contribs.push((*a, g.hadamard(val(b))?));
                    }
                    if needs(b) {
                        contribs.push((*b, g.hadamard(val(a))?));
                    }
                }
                Op::AddRow(x, r) => {
                    if needs(r) {
                        contribs.push((*r, column_sums(&g)));
                    }
                    contribs.push((*x, g));
                }
                Op::Scale(x, s) => contribs.push((*x, g.scale(*s))),
                Op::Transpose(x) => contribs.push((*x, g.transpose())),
                Op::Inverse(x) => {
                    // d(M^-1) = -M^-1 dM M^-1  =>  grad_M = -M^-T G M^-T
                    let inv_t = eval.values[idx].transpose();
                    let t = linalg::matmul(&inv_t, &g)?;
                    contribs.push((*x, linalg::matmul(&t, &inv_t)?.scale(-1.0)));
                }
                Op::LayerNorm { x, gamma, beta, .. } => {
                    let Aux::LayerNorm { xhat, rstd } = &eval.aux[idx] else { unreachable!() };
                    let (gx, ggamma, gbeta) = layer_norm_backward(&g, xhat, rstd, val(gamma));
                    if needs(gamma) {
                        contribs.push((*gamma, ggamma));
                    }
                    if needs(beta) {
                        contribs.push((*beta, gbeta));
                    }
                    contribs.push((*x, gx));
                }
                Op::Softmax { x, .. } => {
                    contribs.push((*x, softmax_backward(&g, &eval.values[idx])));
                }
                Op::Relu(x) => {
                    contribs.push((*x, g.zip_map(val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?));
                }
                Op::Gelu(x) => {
                    contribs.push((*x, g.zip_map(val(x), |gv, xv| gv * gelu_grad(xv))?));
                }
                Op::SliceCols { x, start, .. } => {
                    let src = val(x);
                    let mut full = Tensor::zeros(&[src.rows(), src.cols()]).to_precision(g.precision());
                    let (gc, fc) = (g.cols(), src.cols());
                    let fd = full.data_mut();
                    for r in 0..g.rows() {
                        fd[r * fc + start..r * fc + start + gc].copy_from_slice(g.row(r));
                    }
                    contribs.push((*x, full));
                }
                Op::ConcatCols(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let w = val(x).cols();
                        if needs(x) {
                            contribs.push((*x, slice_cols(&g, start, w)?));
                        }
                        start += w;
                    }
                }
                Op::Cast(x, _) => contribs.push((*x, g.to_precision(val(x).precision()))),
                Op::FakeQuant { x, clip, .. } => {
                    let Aux::FakeQuant(cache) = &eval.aux[idx] else { unreachable!() };
                    let (gx, glo, ghi) = fake_quant_backward(&g, cache, clip.is_some());
                    if let Some((lo, hi)) = clip {
                        if needs(lo) {
                            contribs.push((*lo, glo));
                        }
                        if needs(hi) {
                            contribs.push((*hi, ghi));
                        }
                    }
                    contribs.push((*x, gx));
                }
                Op::FrobeniusSq(x) => {
                    let s = 2.0 * g.data()[0];
                    contribs.push((*x, val(x).scale(s)));
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    let src = val(x);
                    contribs.push((*x, Tensor::full(src.shape(), s).to_precision(src.precision())));
                }
            }
            for (id, c) in contribs {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                grads[id.0] = Some(match grads[id.0].take() {
                    Some(acc) => acc.add(&c.to_precision(acc.precision()))?,
                    None => c,
                });
            }
        }

        let mut leaves = GradientMap::new();
        for (name, &id) in &self.leaves {
            if self.nodes[id.0].requires_grad {
                let shape = eval.values[id.0].shape().to_vec();
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&shape).to_precision(eval.values[id.0].precision()));
                leaves.insert(name.clone(), g);
            }
        }
        Ok(Gradients { nodes: grads, leaves })
    }
}

/// Cached forward values of every node.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn root(&self) -> &Tensor {
        self.values.last().expect("empty graph")
    }

    /// Which side of the clamp range each element of a fake-quant node fell
    /// on (-1 below, 0 inside, 1 above), plus one entry per group for the
    /// zero-point clamp and, when statistics carry gradient, the positions of
    /// each group's extremes. `None` for other nodes.
    pub fn clamp_regions(&self, id: NodeId) -> Option<Vec<i64>> {
        match &self.aux[id.0] {
            Aux::FakeQuant(c) => {
                let mut r: Vec<i64> = c.region.iter().map(|&v| v as i64).collect();
                r.extend(c.scales.iter().map(|s| s.zp_clamped as i64));
                if c.stats_grad {
                    r.extend(c.stats.arg_min.iter().chain(&c.stats.arg_max).map(|&i| i as i64));
                }
                Some(r)
            }
            _ => None,
        }
    }

    pub fn fake_quant_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.aux
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a, Aux::FakeQuant(_)))
            .map(|(i, _)| NodeId(i))
    }
}

/// Reverse-pass result: gradients at every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    leaves: GradientMap,
}

impl Gradients {
    pub fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.leaves.get(name)
    }

    /// Gradient with respect to an intermediate node, if it was reached.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn leaves(&self) -> &GradientMap {
        &self.leaves
    }

    pub fn into_leaves(self) -> GradientMap {
        self.leaves
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    LayerNorm { xhat: Tensor, rstd: Vec<f64> },
    FakeQuant(Box<FqCache>),
}

#[derive(Debug, Clone)]
struct FqCache {
    config: QuantConfig,
    stats_grad: bool,
    stats: GroupStats,
    clip_lo: Vec<f64>,
    clip_hi: Vec<f64>,
    scales: Vec<GroupScale>,
    groups: Vec<usize>,
    /// `round(x / delta) - x / delta` per element.
    residual: Vec<f64>,
    /// `round(zp_raw) - zp_raw` per group.
    zp_residual: Vec<f64>,
    region: Vec<i8>,
}

fn as_matrix(t: &Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t.clone()
    } else {
        t.as_row()
    }
}

fn same_precision<'a>(a: &'a Tensor, b: &Tensor) -> Result<&'a Tensor> {
    if a.precision() != b.precision() {
        return Err(Error::shape(format!(
            "operands differ in precision ({:?} vs {:?}); insert a cast",
            a.precision(),
            b.precision()
        )));
    }
    Ok(a)
}

fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    same_precision(x, row)?;
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(Error::shape(format!(
            "row broadcast needs 1x{}, got {:?}",
            x.cols(),
            row.shape()
        )));
    }
    let c = x.cols();
    let p = x.precision();
    let r = row.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.round(v + r[i % c]))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data, p))
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    let p = g.precision();
    Tensor::from_parts(vec![1, c], out.into_iter().map(|v| p.round(v)).collect(), p)
}

fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > x.cols() {
        return Err(Error::shape(format!(
            "column slice {start}..{} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut data = Vec::with_capacity(x.rows() * len);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![x.rows(), len], data, x.precision()))
}

fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("empty concatenation"))?;
    let rows = first.rows();
    let p = first.precision();
    if parts.iter().any(|t| t.rows() != rows || t.precision() != p) {
        return Err(Error::shape("concatenated blocks differ in rows or precision"));
    }
    let cols: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], data, p))
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layer norm over {c} features got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    same_precision(x, gamma)?;
    same_precision(x, beta)?;
    let p = x.precision();
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            y.push(p.round(h * gamma.data()[j] + beta.data()[j]));
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y, p),
        Tensor::from_parts(shape, xhat, Precision::Double),
        rstds,
    ))
}

fn layer_norm_backward(g: &Tensor, xhat: &Tensor, rstd: &[f64], gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, c) = (g.rows(), g.cols());
    let p = g.precision();
    let mut gx = Vec::with_capacity(g.len());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let n = c as f64;
    for r in 0..rows {
        let gr = g.row(r);
        let hr = xhat.row(r);
        let mut sum_d = 0.0;
        let mut sum_dh = 0.0;
        for j in 0..c {
            let d = gr[j] * gamma.data()[j];
            sum_d += d;
            sum_dh += d * hr[j];
            ggamma[j] += gr[j] * hr[j];
            gbeta[j] += gr[j];
        }
        for j in 0..c {
            let d = gr[j] * gamma.data()[j];
            gx.push(p.round(rstd[r] / n * (n * d - sum_d - hr[j] * sum_dh)));
        }
    }
    let round = |v: Vec<f64>| v.into_iter().map(|x| p.round(x)).collect();
    (
        Tensor::from_parts(g.shape().to_vec(), gx, p),
        Tensor::from_parts(vec![1, c], round(ggamma), p),
        Tensor::from_parts(vec![1, c], round(gbeta), p),
    )
}

/// Row-wise softmax computed in double precision; with `causal`, entry
/// `(i, j)` is masked out for `j > i`.
fn softmax(x: &Tensor, causal: bool) -> Tensor {
    let c = x.cols();
    let p = x.precision();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let limit = if causal { (r + 1).min(c) } else { c };
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            out[r * c + j] = e;
            total += e;
        }
        for j in 0..limit {
            out[r * c + j] = p.round(out[r * c + j] / total);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out, p)
}

fn softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let c = g.cols();
    let p = g.precision();
    let mut out = Vec::with_capacity(g.len());
    for r in 0..g.rows() {
        let (gr, yr) = (g.row(r), y.row(r));
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out.push(p.round(yr[j] * (gr[j] - dot)));
        }
    }
    Tensor::from_parts(g.shape().to_vec(), out, p)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn fake_quant_forward(
    x: &Tensor,
    config: &QuantConfig,
    clips: Option<(&Tensor, &Tensor)>,
    frozen: Option<&FqCache>,
    stats_grad: bool,
) -> Result<(Tensor, FqCache)> {
    config.validate()?;
    let (rows, cols) = (x.rows(), x.cols());
    let n_groups = config.group_count(rows, cols)?;
    let stats = match frozen {
        Some(f) if !stats_grad => f.stats.clone(),
        _ => GroupStats::of(x, config)?,
    };
    let (clip_lo, clip_hi) = match clips {
        Some((lo, hi)) => {
            if lo.len() != n_groups || hi.len() != n_groups {
                return Err(Error::shape(format!(
                    "fake quant expects {n_groups} clip scalars, got {} and {}",
                    lo.len(),
                    hi.len()
                )));
            }
            (
                lo.data().iter().map(|&v| quant::sigmoid(v)).collect::<Vec<_>>(),
                hi.data().iter().map(|&v| quant::sigmoid(v)).collect::<Vec<_>>(),
            )
        }
        None => (vec![1.0; n_groups], vec![1.0; n_groups]),
    };
    let qmax = config.qmax();
    let mut scales: Vec<GroupScale> = (0..n_groups)
        .map(|g| quant::group_scale(config, stats.min[g], stats.max[g], clip_lo[g], clip_hi[g]))
        .collect();
    let zp_residual: Vec<f64> = match frozen {
        Some(f) => {
            // Surrogate zero point: unrounded value plus the frozen residual.
            for (g, s) in scales.iter_mut().enumerate() {
                if !config.symmetric {
                    let base = &f.scales[g];
                    s.zp_clamped = base.zp_clamped;
                    s.zero_point = if base.zp_clamped {
                        base.zero_point
                    } else {
                        s.zp_raw + f.zp_residual[g]
                    };
                }
            }
            f.zp_residual.clone()
        }
        None => scales.iter().map(|s| s.zp_raw.round() - s.zp_raw).collect(),
    };
    let groups = config.group_map(rows, cols);
    let p = x.precision();
    let mut out = Vec::with_capacity(x.len());
    let mut residual = Vec::with_capacity(x.len());
    let mut region = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let s = &scales[groups[i]];
        let u = v / s.delta;
        match frozen {
            None => {
                let rounded = u.round();
                let idx = rounded + s.zero_point;
                let reg = if idx < 0.0 {
                    -1
                } else if idx > qmax {
                    1
                } else {
                    0
                };
                let q = idx.clamp(0.0, qmax);
                residual.push(rounded - u);
                region.push(reg);
                out.push(p.round(quant::dequant(q, s.delta, s.zero_point)));
            }
            Some(f) => {
                let rho = f.residual[i];
                let cont = u + s.zero_point;
                let (reg, val) = if cont < -0.5 {
                    (-1, s.delta * (0.0 - s.zero_point))
                } else if cont >= qmax + 0.5 {
                    (1, s.delta * (qmax - s.zero_point))
                } else {
                    (0, s.delta * (u + rho))
                };
                residual.push(rho);
                region.push(reg);
                out.push(p.round(val));
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out, p),
        FqCache {
            config: *config,
            stats_grad,
            stats,
            clip_lo,
            clip_hi,
            scales,
            groups,
            residual,
            zp_residual,
            region,
        },
    ))
}

/// Straight-through backward: identity inside the clamp range, zero outside;
/// clip gradients follow from the step size's dependence on the clip scalars.
fn fake_quant_backward(g: &Tensor, c: &FqCache, with_clip: bool) -> (Tensor, Tensor, Tensor) {
    let p = g.precision();
    let n_groups = c.scales.len();
    let qmax = c.config.qmax();
    let mut gx = Vec::with_capacity(g.len());
    let mut d_delta = vec![0.0; n_groups];
    // upstream summed over clamped elements whose zero point is unrounded
    let mut d_zp = vec![0.0; n_groups];
    for (i, &gv) in g.data().iter().enumerate() {
        let grp = c.groups[i];
        let s = &c.scales[grp];
        match c.region[i] {
            0 => {
                gx.push(gv);
                d_delta[grp] += gv * c.residual[i];
            }
            side => {
                gx.push(0.0);
                let bound = if side < 0 { 0.0 } else { qmax };
                if c.config.symmetric || s.zp_clamped {
                    d_delta[grp] += gv * (bound - s.zero_point);
                } else {
                    // zero point tracks -clip_lo * min / delta
                    d_delta[grp] += gv * (bound - c.zp_residual[grp]);
                    d_zp[grp] += gv;
                }
            }
        }
    }
    let mut glo = vec![0.0; n_groups];
    let mut ghi = vec![0.0; n_groups];
    for grp in 0..n_groups {
        let s = &c.scales[grp];
        let (min, max) = (c.stats.min[grp], c.stats.max[grp]);
        let (lo, hi) = (c.clip_lo[grp], c.clip_hi[grp]);
        // (d clip_lo, d clip_hi, d min, d max) before the sigmoid
        let (dc_lo, dc_hi, dmin, dmax) = if s.floored {
            (d_zp[grp] * min, 0.0, d_zp[grp] * lo, 0.0)
        } else if c.config.symmetric {
            let half = (1u64 << (c.config.bits - 1)) as f64;
            let absmax = min.abs().max(max.abs());
            let d_absmax = d_delta[grp] * hi / (half - 1.0);
            let (dmin, dmax) = if max.abs() >= min.abs() { (0.0, d_absmax) } else { (-d_absmax, 0.0) };
            (0.0, d_delta[grp] * absmax / (half - 1.0), dmin, dmax)
        } else {
            (
                d_delta[grp] * (-min / qmax) + d_zp[grp] * min,
                d_delta[grp] * (max / qmax),
                -d_delta[grp] * lo / qmax + d_zp[grp] * lo,
                d_delta[grp] * hi / qmax,
            )
        };
        if c.stats_grad {
            gx[c.stats.arg_min[grp]] += dmin;
            gx[c.stats.arg_max[grp]] += dmax;
        }
        glo[grp] = p.round(dc_lo * lo * (1.0 - lo));
        ghi[grp] = p.round(dc_hi * hi * (1.0 - hi));
    }
    let gx = Tensor::from_parts(g.shape().to_vec(), gx.into_iter().map(|v| p.round(v)).collect(), p);
    if !with_clip {
        let z = Tensor::zeros(&[1, n_groups]);
        return (gx, z.clone(), z);
    }
    (
        gx,
        Tensor::from_parts(vec![1, n_groups], glo, p),
        Tensor::from_parts(vec![1, n_groups], ghi, p),
    )
}
