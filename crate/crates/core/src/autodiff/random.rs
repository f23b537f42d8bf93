//! Seeded random expression graphs for gradient validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bindings, ExprGraph, NodeId};
use crate::linalg::{random_normal, random_sdd};
use crate::quant::{Granularity, QuantConfig};
use crate::tensor::Tensor;

/// A graph, its bindings and the names of its trainable leaves.
pub struct RandomGraph {
    pub graph: ExprGraph,
    pub bindings: Bindings,
    pub params: Vec<String>,
}

/// Builds a scalar-rooted graph mixing matmul, inverse, layer norm, softmax
/// and fake quantization, shaped like `X A^-1 Q(A W)` with extra layers.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = rng.random_range(2..6);
    let d = rng.random_range(2..6);
    let out = rng.random_range(2..5);
    let mut g = ExprGraph::new();
    let mut b = Bindings::new();
    let mut params = Vec::new();

    let x = g.input("x");
    b.insert("x".into(), random_normal(tokens, d, &mut rng));

    let gamma = g.param("gamma");
    let beta = g.param("beta");
    b.insert("gamma".into(), random_normal(1, d, &mut rng).map(|v| 1.0 + 0.3 * v));
    b.insert("beta".into(), random_normal(1, d, &mut rng).scale(0.2));
    params.extend(["gamma".to_string(), "beta".to_string()]);
    let mut h = g.layer_norm(x, gamma, beta, 1e-5);

    let a = g.param("a");
    let a_val = random_sdd(d, &mut rng);
    let mask = Tensor::from_parts(
        vec![d, d],
        (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { rng.random_range(0.1..1.0) })
            .collect(),
        crate::tensor::Precision::Double,
    );
    b.insert("a".into(), a_val.scale(0.5));
    params.push("a".into());
    let m = g.input("mask");
    b.insert("mask".into(), mask);
    let a_eff = g.hadamard(a, m);
    let a_inv = g.inverse(a_eff);

    let delta = g.param("delta");
    b.insert("delta".into(), random_normal(1, d, &mut rng).scale(0.1));
    params.push("delta".into());
    let neg = g.scale(delta, -1.0);
    h = g.add_row(h, neg);
    let xt = g.matmul(h, a_inv);

    let w = g.input("w");
    b.insert("w".into(), random_normal(d, out, &mut rng));
    let aw = g.matmul(a_eff, w);
    let use_clip = rng.random_bool(0.7);
    let bits = [2u32, 3, 4, 8][rng.random_range(0..4)];
    let cfg = QuantConfig {
        bits,
        granularity: if rng.random_bool(0.5) {
            Granularity::PerChannel
        } else {
            Granularity::PerTensor
        },
        symmetric: rng.random_bool(0.3),
        learnable_clip: use_clip,
    };
    let groups = cfg.group_count(d, out).expect("valid layout");
    let clip = if use_clip {
        let lo = g.param("clip_lo");
        let hi = g.param("clip_hi");
        let raw = |rng: &mut ChaCha8Rng| {
            Tensor::from_parts(
                vec![1, groups],
                (0..groups).map(|_| rng.random_range(0.5..4.0)).collect(),
                crate::tensor::Precision::Double,
            )
        };
        b.insert("clip_lo".into(), raw(&mut rng));
        b.insert("clip_hi".into(), raw(&mut rng));
        params.extend(["clip_lo".to_string(), "clip_hi".to_string()]);
        Some((lo, hi))
    } else {
        None
    };
    let wq = if rng.random_bool(0.5) {
        g.fake_quant_minmax(aw, cfg, clip)
    } else {
        g.fake_quant(aw, cfg, clip)
    };
    let mut y = g.matmul(xt, wq);

    y = match rng.random_range(0..3) {
        0 => g.gelu(y),
        1 => {
            let t = g.transpose(y);
            let s = g.matmul(y, t);
            let s = g.softmax(s, rng.random_bool(0.5));
            g.matmul(s, y)
        }
        _ => g.relu(y),
    };
    let scores = attention_like(&mut g, &mut b, &mut rng, y, out);
    let target = g.input("target");
    b.insert("target".into(), random_normal(tokens, out, &mut rng));
    let diff = g.sub(scores, target);
    g.frobenius_sq(diff);

    RandomGraph {
        graph: g,
        bindings: b,
        params,
    }
}

fn attention_like(g: &mut ExprGraph, b: &mut Bindings, rng: &mut ChaCha8Rng, y: NodeId, width: usize) -> NodeId {
    let wk = g.input("wk");
    b.insert("wk".into(), random_normal(width, width, rng).scale(0.5));
    let k = g.matmul(y, wk);
    let kt = g.transpose(k);
    let s = g.matmul(y, kt);
    let s = g.scale(s, 0.5);
    let p = g.softmax(s, true);
    let mixed = g.matmul(p, y);
    let half = width / 2;
    let left = g.slice_cols(mixed, 0, half.max(1));
    let right = g.slice_cols(mixed, half.max(1), width - half.max(1));
    g.concat_cols(vec![right, left])
}
