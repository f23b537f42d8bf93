use super::{Bindings, Evaluation, ExprGraph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Entries compared against the finite difference.
    pub checked: usize,
    /// Entries whose perturbation moved a fake-quant element across a clamp
    /// boundary or a relu input across zero; the function has a kink there
    /// and they are not compared.
    pub skipped: usize,
}

/// Largest relative error between the analytic gradient of `leaf` and a
/// central finite difference with step `eps`.
///
/// Per entry the error is `|a - n| / max(|a|, |n|, 1e-3 * max|a|, 1e-12)`, so
/// entries far below the gradient's scale are judged against that scale.
/// Fake-quant nodes are differenced through their straight-through surrogate
/// (see [`ExprGraph::forward_surrogate`]).
pub fn check_gradient(graph: &ExprGraph, bindings: &Bindings, leaf: &str, eps: f64) -> Result<f64> {
    Ok(check_gradient_detailed(graph, bindings, leaf, eps)?.max_rel_error)
}

pub fn check_gradient_detailed(
    graph: &ExprGraph,
    bindings: &Bindings,
    leaf: &str,
    eps: f64,
) -> Result<GradCheck> {
    let base = graph.forward(bindings)?;
    let grads = graph.backward(&base)?;
    let point = bindings
        .get(leaf)
        .ok_or_else(|| Error::UnboundLeaf(leaf.to_string()))?
        .clone();
    let analytic = grads
        .leaf(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[point.len()]));

    let fq_nodes: Vec<_> = base.fake_quant_nodes().collect();
    let base_regions: Vec<_> = fq_nodes.iter().map(|&id| base.clamp_regions(id)).collect();
    let relu_inputs: Vec<NodeId> = graph
        .nodes
        .iter()
        .filter_map(|n| match n.op {
            Op::Relu(x) => Some(x),
            _ => None,
        })
        .collect();
    let signs = |ev: &Evaluation| -> Vec<Vec<bool>> {
        relu_inputs
            .iter()
            .map(|&id| ev.value(id).data().iter().map(|&v| v > 0.0).collect())
            .collect()
    };
    let base_signs = signs(&base);

    let scale_floor = (1e-3 * analytic.max_abs()).max(1e-12);
    let mut probe = bindings.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..point.len() {
        let mut eval_at = |delta: f64| -> Result<(f64, bool)> {
            let mut data = point.data().to_vec();
            data[i] += delta;
            probe.insert(
                leaf.to_string(),
                Tensor::new(point.shape().to_vec(), data, point.precision())?,
            );
            let ev = graph.forward_surrogate(&probe, &base)?;
            let same = fq_nodes
                .iter()
                .zip(&base_regions)
                .all(|(&id, r)| ev.clamp_regions(id) == *r)
                && signs(&ev) == base_signs;
            Ok((ev.root().data()[0], same))
        };
        let (plus, same_plus) = eval_at(eps)?;
        let (minus, same_minus) = eval_at(-eps)?;
        if !(same_plus && same_minus) {
            result.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(scale_floor);
        let err = (a - numeric).abs() / denom;
        result.max_rel_error = result.max_rel_error.max(err);
        result.checked += 1;
    }
    probe.insert(leaf.to_string(), point);
    Ok(result)
}
