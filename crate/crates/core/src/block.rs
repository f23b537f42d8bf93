//! A small OPT-style pre-LayerNorm transformer block, evaluated on the
//! autodiff tape either in full precision or with affine transforms and fake
//! quantization in place.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{self, AffineTransform, MaskSchedule, Placement, TransformKind};
use crate::autodiff::{Bindings, ExprGraph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{self, random_normal, PrecisionScheme};
use crate::quant::{QuantConfig, CLIP_RAW_INIT};
use crate::tensor::{Precision, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// The six linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linear {
    Q,
    K,
    V,
    Out,
    Fc1,
    Fc2,
}

impl Linear {
    pub const ALL: [Linear; 6] = [Linear::Q, Linear::K, Linear::V, Linear::Out, Linear::Fc1, Linear::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "q",
            Linear::K => "k",
            Linear::V => "v",
            Linear::Out => "out",
            Linear::Fc1 => "fc1",
            Linear::Fc2 => "fc2",
        }
    }

    /// The transform placement feeding this layer, if any.
    pub fn placement(self) -> Option<Placement> {
        match self {
            Linear::Q | Linear::K | Linear::V => Some(Placement::PreQkv),
            Linear::Out => Some(Placement::PreOutProj),
            Linear::Fc1 => Some(Placement::PreFc1),
            Linear::Fc2 => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub n_heads: usize,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// Weights are `in x out`, applied as `x W + b`.
    pub weights: BTreeMap<Linear, Tensor>,
    pub biases: BTreeMap<Linear, Tensor>,
}

impl BlockParams {
    /// Seeded random block. A few LayerNorm channels get large gains and
    /// offsets so activations carry the channel outliers that make
    /// quantization hard.
    pub fn random(d: usize, n_heads: usize, seed: u64) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("{n_heads} heads do not divide hidden size {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ln = |rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
            let mut g: Vec<f64> = (0..d).map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let mut b: Vec<f64> = (0..d).map(|_| 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            for _ in 0..(d / 16).max(1) {
                let c = rng.random_range(0..d);
                g[c] *= rng.random_range(4.0..10.0);
                b[c] += rng.random_range(-3.0..3.0);
            }
            (Tensor::vector(g), Tensor::vector(b))
        };
        let (ln1_gamma, ln1_beta) = ln(&mut rng);
        let (ln2_gamma, ln2_beta) = ln(&mut rng);
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for lin in Linear::ALL {
            let (i, o) = linear_shape(lin, d);
            weights.insert(lin, random_normal(i, o, &mut rng).scale(1.0 / (i as f64).sqrt()));
            biases.insert(lin, Tensor::vector(random_normal(1, o, &mut rng).scale(0.02).into_data()));
        }
        Ok(BlockParams {
            n_heads,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            weights,
            biases,
        })
    }

    pub fn hidden(&self) -> usize {
        self.ln1_gamma.len()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.n_heads
    }

    pub fn weight(&self, lin: Linear) -> &Tensor {
        &self.weights[&lin]
    }

    pub fn bias(&self, lin: Linear) -> &Tensor {
        &self.biases[&lin]
    }

    pub fn precision(&self) -> Precision {
        self.ln1_gamma.precision()
    }

    pub fn to_precision(&self, p: Precision) -> BlockParams {
        let conv = |m: &BTreeMap<Linear, Tensor>| m.iter().map(|(k, v)| (*k, v.to_precision(p))).collect();
        BlockParams {
            n_heads: self.n_heads,
            ln1_gamma: self.ln1_gamma.to_precision(p),
            ln1_beta: self.ln1_beta.to_precision(p),
            ln2_gamma: self.ln2_gamma.to_precision(p),
            ln2_beta: self.ln2_beta.to_precision(p),
            weights: conv(&self.weights),
            biases: conv(&self.biases),
        }
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.hidden()
            + self.weights.values().map(Tensor::len).sum::<usize>()
            + self.biases.values().map(Tensor::len).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("{} heads do not divide hidden size {d}", self.n_heads)));
        }
        for t in [&self.ln1_beta, &self.ln2_gamma, &self.ln2_beta] {
            if t.len() != d {
                return Err(Error::shape("layer norm parameters differ in size"));
            }
        }
        for lin in Linear::ALL {
            let (i, o) = linear_shape(lin, d);
            let w = self.weights.get(&lin).ok_or_else(|| Error::MissingTensor(format!("w_{}", lin.name())))?;
            let b = self.biases.get(&lin).ok_or_else(|| Error::MissingTensor(format!("b_{}", lin.name())))?;
            if w.shape() != [i, o] || b.len() != o {
                return Err(Error::shape(format!(
                    "{}: expected weight {i}x{o} and bias {o}, got {:?} and {:?}",
                    lin.name(),
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Tensors under `{prefix}{name}`, e.g. `block0.w_q`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}n_heads"), Tensor::vector(vec![self.n_heads as f64])),
            (format!("{prefix}ln1_gamma"), self.ln1_gamma.clone()),
            (format!("{prefix}ln1_beta"), self.ln1_beta.clone()),
            (format!("{prefix}ln2_gamma"), self.ln2_gamma.clone()),
            (format!("{prefix}ln2_beta"), self.ln2_beta.clone()),
        ];
        for lin in Linear::ALL {
            out.push((format!("{prefix}w_{}", lin.name()), self.weights[&lin].clone()));
            out.push((format!("{prefix}b_{}", lin.name()), self.biases[&lin].clone()));
        }
        out
    }

    pub fn from_named(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            let key = format!("{prefix}{n}");
            tensors.get(&key).cloned().ok_or(Error::MissingTensor(key))
        };
        let heads = get("n_heads")?;
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for lin in Linear::ALL {
            weights.insert(lin, get(&format!("w_{}", lin.name()))?);
            biases.insert(lin, get(&format!("b_{}", lin.name()))?);
        }
        let p = BlockParams {
            n_heads: heads.data().first().copied().unwrap_or(0.0) as usize,
            ln1_gamma: get("ln1_gamma")?,
            ln1_beta: get("ln1_beta")?,
            ln2_gamma: get("ln2_gamma")?,
            ln2_beta: get("ln2_beta")?,
            weights,
            biases,
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn linear_shape(lin: Linear, d: usize) -> (usize, usize) {
    match lin {
        Linear::Fc1 => (d, 4 * d),
        Linear::Fc2 => (4 * d, d),
        _ => (d, d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementKind {
    Full,
    DiagonalOnly,
    PerHead,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPlacementConfig {
    pub pre_qkv: PlacementKind,
    pub pre_out_proj: PlacementKind,
    pub pre_fc1: PlacementKind,
    /// Learn a shift at the placements that follow a LayerNorm.
    #[serde(default = "default_true")]
    pub shift: bool,
    pub weight_quant: Option<QuantConfig>,
    #[serde(default)]
    pub act_quant: Option<QuantConfig>,
}

fn default_true() -> bool {
    true
}

impl Default for TransformPlacementConfig {
    /// Fusable layout: diagonal after each LayerNorm, per-head before the
    /// output projection, 4-bit per-channel weights.
    fn default() -> Self {
        TransformPlacementConfig {
            pre_qkv: PlacementKind::DiagonalOnly,
            pre_out_proj: PlacementKind::PerHead,
            pre_fc1: PlacementKind::DiagonalOnly,
            shift: true,
            weight_quant: Some(QuantConfig::weight(4)),
            act_quant: None,
        }
    }
}

impl TransformPlacementConfig {
    /// Full transforms at every placement.
    pub fn full(weight_quant: Option<QuantConfig>) -> Self {
        TransformPlacementConfig {
            pre_qkv: PlacementKind::Full,
            pre_out_proj: PlacementKind::PerHead,
            pre_fc1: PlacementKind::Full,
            shift: true,
            weight_quant,
            act_quant: None,
        }
    }

    pub fn kind(&self, p: Placement) -> PlacementKind {
        match p {
            Placement::PreQkv => self.pre_qkv,
            Placement::PreOutProj => self.pre_out_proj,
            Placement::PreFc1 => self.pre_fc1,
        }
    }

    /// Checks placement kinds and returns the configuration actually used:
    /// with activation quantization on, the LayerNorm placements only learn
    /// a diagonal.
    pub fn resolve(&self) -> Result<Self> {
        if let Some(w) = &self.weight_quant {
            w.validate()?;
        }
        if let Some(a) = &self.act_quant {
            a.validate()?;
        }
        for p in [Placement::PreQkv, Placement::PreFc1] {
            if self.kind(p) == PlacementKind::PerHead {
                return Err(Error::Config(format!("{p}: per-head transforms only apply before the output projection")));
            }
        }
        if self.pre_out_proj == PlacementKind::Full {
            return Err(Error::Config(
                "pre_out_proj: a full transform would mix heads; use per-head".into(),
            ));
        }
        let mut out = *self;
        if self.act_quant.is_some() {
            for (p, slot) in [(Placement::PreQkv, &mut out.pre_qkv), (Placement::PreFc1, &mut out.pre_fc1)] {
                if *slot == PlacementKind::Full {
                    log::info!("{p}: weight-activation mode learns only the diagonal here");
                    *slot = PlacementKind::DiagonalOnly;
                }
            }
        }
        Ok(out)
    }

    pub fn transform_kind(&self, p: Placement, head_dim: usize) -> Option<TransformKind> {
        match self.kind(p) {
            PlacementKind::Full => Some(TransformKind::Full),
            PlacementKind::DiagonalOnly => Some(TransformKind::DiagonalOnly),
            PlacementKind::PerHead => Some(TransformKind::PerHead { head_dim }),
            PlacementKind::None => None,
        }
    }

    pub fn active(&self) -> impl Iterator<Item = Placement> + '_ {
        Placement::ALL.into_iter().filter(|p| self.kind(*p) != PlacementKind::None)
    }
}

/// Raw (pre-sigmoid) clip scalars of one weight, one per quantization group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub lo: Tensor,
    pub hi: Tensor,
}

impl ClipParams {
    pub fn init(groups: usize) -> Self {
        ClipParams {
            lo: Tensor::full(&[1, groups], CLIP_RAW_INIT),
            hi: Tensor::full(&[1, groups], CLIP_RAW_INIT),
        }
    }
}

/// Everything the transformed-quantized forward needs besides the block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    /// Resolved placement configuration.
    pub config: TransformPlacementConfig,
    pub transforms: BTreeMap<Placement, AffineTransform>,
    pub clips: BTreeMap<Linear, ClipParams>,
}

impl TransformSet {
    /// Identity transforms and full-range clips for every active placement.
    pub fn identity(params: &BlockParams, config: &TransformPlacementConfig) -> Result<Self> {
        let config = config.resolve()?;
        let d = params.hidden();
        let mut transforms = BTreeMap::new();
        for p in config.active() {
            let kind = config.transform_kind(p, params.head_dim()).expect("active placement");
            transforms.insert(p, AffineTransform::identity(p, kind, d));
        }
        Ok(TransformSet {
            clips: init_clips(d, &config)?,
            config,
            transforms,
        })
    }

    pub fn transform(&self, p: Placement) -> Option<&AffineTransform> {
        self.transforms.get(&p)
    }

    /// Bindings for the trainable leaves: `a.*`, `mask.*`, `shift.*`, `clip_*`.
    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        for (p, t) in &self.transforms {
            b.insert(format!("a.{p}"), t.matrix_a.clone());
            b.insert(format!("mask.{p}"), t.mask.to_precision(t.matrix_a.precision()));
            if let Some(s) = &t.shift_delta {
                b.insert(format!("shift.{p}"), s.as_row());
            }
        }
        for (lin, c) in &self.clips {
            b.insert(format!("clip_lo.{}", lin.name()), c.lo.clone());
            b.insert(format!("clip_hi.{}", lin.name()), c.hi.clone());
        }
        b
    }

    /// Verifies every effective matrix inverts at its working precision.
    pub fn check_invertible(&self) -> Result<()> {
        for (p, t) in &self.transforms {
            let scheme = match t.matrix_a.precision() {
                Precision::Double => PrecisionScheme::Double,
                Precision::Single => PrecisionScheme::Float,
            };
            if let Err(Error::Singular { pivot }) = linalg::invert(&t.effective()?, scheme) {
                return Err(Error::SingularTransform {
                    placement: p.to_string(),
                    pivot,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn init_clips(d: usize, config: &TransformPlacementConfig) -> Result<BTreeMap<Linear, ClipParams>> {
    let mut clips = BTreeMap::new();
    if let Some(w) = config.weight_quant.filter(|w| w.learnable_clip) {
        for lin in Linear::ALL {
            let (i, o) = linear_shape(lin, d);
            clips.insert(lin, ClipParams::init(w.group_count(i, o)?));
        }
    }
    Ok(clips)
}

pub enum BlockMode<'a> {
    FullPrecision,
    TransformedQuantized(&'a TransformSet),
}

/// What the graph builder inserts around the plain block.
#[derive(Clone, Copy)]
pub(crate) struct BuildSpec<'a> {
    pub transforms: Option<&'a TransformSet>,
    pub weight_quant: Option<QuantConfig>,
    pub act_quant: Option<QuantConfig>,
}

impl<'a> BuildSpec<'a> {
    pub fn full_precision() -> Self {
        BuildSpec {
            transforms: None,
            weight_quant: None,
            act_quant: None,
        }
    }

    pub fn from_mode(mode: &BlockMode<'a>) -> Self {
        match mode {
            BlockMode::FullPrecision => Self::full_precision(),
            BlockMode::TransformedQuantized(ts) => BuildSpec {
                transforms: Some(ts),
                weight_quant: ts.config.weight_quant,
                act_quant: ts.config.act_quant,
            },
        }
    }
}

/// A block evaluated on the tape.
pub struct BlockGraph {
    pub graph: ExprGraph,
    /// Bindings for everything except `x` (and `target` when a loss is attached).
    pub bindings: Bindings,
    pub output: NodeId,
    /// Placement inputs before any transform, plus the block input.
    pub taps: BTreeMap<&'static str, NodeId>,
    /// `A ∘ GM` nodes of the active transforms.
    pub effective: BTreeMap<Placement, NodeId>,
    pub loss: Option<NodeId>,
}

struct Builder<'a> {
    g: ExprGraph,
    b: Bindings,
    params: &'a BlockParams,
    spec: BuildSpec<'a>,
    ps: Precision,
    effective: BTreeMap<Placement, NodeId>,
}

struct Applied {
    a_star: NodeId,
    shift: Option<NodeId>,
    pt: Precision,
}

impl<'a> Builder<'a> {
    fn constant(&mut self, name: &str, t: &Tensor) -> NodeId {
        self.b.insert(name.to_string(), t.clone());
        self.g.input(name)
    }

    fn cast(&mut self, x: NodeId, from: Precision, to: Precision) -> NodeId {
        if from == to {
            x
        } else {
            self.g.cast(x, to)
        }
    }

    /// Shifts and multiplies by the inverse effective matrix.
    fn transform_activation(&mut self, x: NodeId, p: Placement) -> (NodeId, Option<Applied>) {
        let Some(t) = self.spec.transforms.and_then(|ts| ts.transform(p)) else {
            return (x, None);
        };
        let pt = t.matrix_a.precision();
        let a = self.g.param(&format!("a.{p}"));
        let mask = self.g.input(&format!("mask.{p}"));
        let a_star = self.g.hadamard(a, mask);
        self.effective.insert(p, a_star);
        let shift = t.shift_delta.as_ref().map(|_| self.g.param(&format!("shift.{p}")));
        let mut xs = x;
        if let Some(s) = shift {
            let neg = self.g.scale(s, -1.0);
            let neg = self.cast(neg, pt, self.ps);
            xs = self.g.add_row(x, neg);
        }
        let xs = self.cast(xs, self.ps, pt);
        let inv = self.g.inverse(a_star);
        let y = self.g.matmul(xs, inv);
        let y = self.cast(y, pt, self.ps);
        (y, Some(Applied { a_star, shift, pt }))
    }

    fn quant_act(&mut self, x: NodeId) -> NodeId {
        match self.spec.act_quant {
            Some(cfg) => self.g.fake_quant_minmax(x, cfg, None),
            None => x,
        }
    }

    fn linear(&mut self, x: NodeId, lin: Linear, applied: Option<&Applied>) -> NodeId {
        let w = self.constant(&format!("w_{}", lin.name()), self.params.weight(lin));
        let b = self.constant(&format!("b_{}", lin.name()), &self.params.bias(lin).as_row());
        let (mut w_eff, mut b_eff) = (w, b);
        if let Some(ap) = applied {
            let wt = self.cast(w, self.ps, ap.pt);
            let aw = self.g.matmul(ap.a_star, wt);
            w_eff = self.cast(aw, ap.pt, self.ps);
            if let Some(s) = ap.shift {
                let sw = self.g.matmul(s, wt);
                let sw = self.cast(sw, ap.pt, self.ps);
                b_eff = self.g.add(b, sw);
            }
        }
        if let Some(cfg) = self.spec.weight_quant {
            let clip = self
                .spec
                .transforms
                .and_then(|ts| ts.clips.get(&lin))
                .filter(|_| cfg.learnable_clip)
                .map(|_| {
                    (
                        self.g.param(&format!("clip_lo.{}", lin.name())),
                        self.g.param(&format!("clip_hi.{}", lin.name())),
                    )
                });
            w_eff = self.g.fake_quant_minmax(w_eff, cfg, clip);
        }
        let xw = self.g.matmul(x, w_eff);
        self.g.add_row(xw, b_eff)
    }

    fn build(mut self, with_loss: bool) -> BlockGraph {
        let p = self.params;
        let d = p.hidden();
        let hd = p.head_dim();
        let mut taps = BTreeMap::new();
        let x = self.g.input("x");
        taps.insert("input", x);

        let g1 = self.constant("ln1_gamma", &p.ln1_gamma.as_row());
        let b1 = self.constant("ln1_beta", &p.ln1_beta.as_row());
        let h1 = self.g.layer_norm(x, g1, b1, LN_EPS);
        taps.insert(Placement::PreQkv.name(), h1);
        let (xt, ap) = self.transform_activation(h1, Placement::PreQkv);
        let xt = self.quant_act(xt);
        let q = self.linear(xt, Linear::Q, ap.as_ref());
        let k = self.linear(xt, Linear::K, ap.as_ref());
        let v = self.linear(xt, Linear::V, ap.as_ref());

        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(p.n_heads);
        for h in 0..p.n_heads {
            let qh = self.g.slice_cols(q, h * hd, hd);
            let kh = self.g.slice_cols(k, h * hd, hd);
            let vh = self.g.slice_cols(v, h * hd, hd);
            let kt = self.g.transpose(kh);
            let s = self.g.matmul(qh, kt);
            let s = self.g.scale(s, scale);
            let pr = self.g.softmax(s, true);
            heads.push(self.g.matmul(pr, vh));
        }
        let o = if heads.len() == 1 { heads[0] } else { self.g.concat_cols(heads) };
        taps.insert(Placement::PreOutProj.name(), o);
        let (ot, ap) = self.transform_activation(o, Placement::PreOutProj);
        let ot = self.quant_act(ot);
        let attn = self.linear(ot, Linear::Out, ap.as_ref());
        let h = self.g.add(x, attn);

        let g2 = self.constant("ln2_gamma", &p.ln2_gamma.as_row());
        let b2 = self.constant("ln2_beta", &p.ln2_beta.as_row());
        let h2 = self.g.layer_norm(h, g2, b2, LN_EPS);
        taps.insert(Placement::PreFc1.name(), h2);
        let (ht, ap) = self.transform_activation(h2, Placement::PreFc1);
        let ht = self.quant_act(ht);
        let f = self.linear(ht, Linear::Fc1, ap.as_ref());
        let f = self.g.relu(f);
        let f = self.quant_act(f);
        let m = self.linear(f, Linear::Fc2, None);
        let output = self.g.add(h, m);
        debug_assert_eq!(d, p.hidden());

        let loss = with_loss.then(|| {
            let t = self.g.input("target");
            let diff = self.g.sub(output, t);
            self.g.frobenius_sq(diff)
        });
        if let Some(ts) = self.spec.transforms {
            self.b.extend(ts.bindings());
        }
        BlockGraph {
            graph: self.g,
            bindings: self.b,
            output,
            taps,
            effective: self.effective,
            loss,
        }
    }
}

pub(crate) fn build_graph(params: &BlockParams, spec: BuildSpec<'_>, with_loss: bool) -> BlockGraph {
    Builder {
        g: ExprGraph::new(),
        b: Bindings::new(),
        params,
        spec,
        ps: params.precision(),
        effective: BTreeMap::new(),
    }
    .build(with_loss)
}

impl BlockGraph {
    pub fn bind_input(&self, x: &Tensor) -> Bindings {
        let mut b = self.bindings.clone();
        b.insert("x".into(), x.clone());
        b
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let ev = self.graph.forward(&self.bind_input(x))?;
        Ok(ev.value(self.output).clone())
    }
}

fn check_input(params: &BlockParams, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != params.hidden() {
        return Err(Error::shape(format!(
            "block input must be tokens x {}, got {:?}",
            params.hidden(),
            x.shape()
        )));
    }
    Ok(())
}

/// One block forward in the given mode. Input and parameters must share a
/// precision; transform matrices may be held in a wider one.
pub fn block_forward(params: &BlockParams, x: &Tensor, mode: &BlockMode<'_>) -> Result<Tensor> {
    params.validate()?;
    check_input(params, x)?;
    if let BlockMode::TransformedQuantized(ts) = mode {
        ts.check_invertible()?;
    }
    build_graph(params, BuildSpec::from_mode(mode), false).eval(x)
}

/// Mean over batches of `||f(x) - f~(x)||_F^2` between full precision and
/// `mode`.
pub fn block_loss(params: &BlockParams, batches: &[Tensor], mode: &BlockMode<'_>) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let fp = build_graph(params, BuildSpec::full_precision(), false);
    let q = build_graph(params, BuildSpec::from_mode(mode), false);
    if let BlockMode::TransformedQuantized(ts) = mode {
        ts.check_invertible()?;
    }
    let losses: Vec<f64> = batches
        .par_iter()
        .map(|x| {
            check_input(params, x)?;
            let a = fp.eval(x)?;
            let b = q.eval(x)?;
            Ok(linalg::frobenius_norm_sq(&a.to_precision(Precision::Double).sub(&b.to_precision(Precision::Double))?))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max: Vec<f64>,
    pub min: Vec<f64>,
    pub absmax: Vec<f64>,
}

impl ChannelStats {
    pub fn of(x: &Tensor) -> Self {
        let c = x.cols();
        let mut s = ChannelStats {
            max: vec![f64::NEG_INFINITY; c],
            min: vec![f64::INFINITY; c],
            absmax: vec![0.0; c],
        };
        for r in 0..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                s.max[j] = s.max[j].max(v);
                s.min[j] = s.min[j].min(v);
                s.absmax[j] = s.absmax[j].max(v.abs());
            }
        }
        s
    }

    pub fn merge(&mut self, other: &ChannelStats) {
        for j in 0..self.max.len() {
            self.max[j] = self.max[j].max(other.max[j]);
            self.min[j] = self.min[j].min(other.min[j]);
            self.absmax[j] = self.absmax[j].max(other.absmax[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementStats {
    pub activation: ChannelStats,
    /// Per input channel, the largest magnitude over the consuming weights.
    pub weight_absmax: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub input: ChannelStats,
    pub placements: BTreeMap<Placement, PlacementStats>,
}

/// Channel statistics at the block input and at every placement input,
/// from a full-precision forward over all batches.
pub fn collect_stats(params: &BlockParams, batches: &[Tensor]) -> Result<BlockStats> {
    if batches.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    params.validate()?;
    let bg = build_graph(params, BuildSpec::full_precision(), false);
    let per_batch: Vec<BTreeMap<&str, ChannelStats>> = batches
        .par_iter()
        .map(|x| {
            check_input(params, x)?;
            let ev = bg.graph.forward(&bg.bind_input(x))?;
            Ok(bg.taps.iter().map(|(k, id)| (*k, ChannelStats::of(ev.value(*id)))).collect())
        })
        .collect::<Result<_>>()?;
    let mut merged = per_batch[0].clone();
    for m in &per_batch[1..] {
        for (k, s) in m {
            merged.get_mut(k).expect("same taps").merge(s);
        }
    }
    let mut placements = BTreeMap::new();
    for p in Placement::ALL {
        let consumers: &[Linear] = match p {
            Placement::PreQkv => &[Linear::Q, Linear::K, Linear::V],
            Placement::PreOutProj => &[Linear::Out],
            Placement::PreFc1 => &[Linear::Fc1],
        };
        let mut wmax = vec![0.0f64; params.hidden()];
        for lin in consumers {
            let w = params.weight(*lin);
            for (j, m) in wmax.iter_mut().enumerate() {
                *m = w.row(j).iter().fold(*m, |acc, v| acc.max(v.abs()));
            }
        }
        placements.insert(
            p,
            PlacementStats {
                activation: merged[p.name()].clone(),
                weight_absmax: wmax,
            },
        );
    }
    Ok(BlockStats {
        input: merged["input"].clone(),
        placements,
    })
}

/// Statistics-based starting point: diagonal scales at every active
/// placement, midpoint shifts at the LayerNorm placements when enabled, and
/// full-range clips. Masks are set for epoch 1 of `epochs` with `alpha`.
pub fn init_transforms(
    params: &BlockParams,
    stats: &BlockStats,
    config: &TransformPlacementConfig,
    epochs: usize,
    alpha: f64,
    exponent: f64,
    transform_precision: Precision,
) -> Result<TransformSet> {
    let config = config.resolve()?;
    let d = params.hidden();
    let mut transforms = BTreeMap::new();
    for p in config.active() {
        let kind = config.transform_kind(p, params.head_dim()).expect("active placement");
        let st = &stats.placements[&p];
        let shift = (config.shift && p.follows_layer_norm())
            .then(|| affine::init_shift(&st.activation.max, &st.activation.min))
            .transpose()?;
        let act_range: Vec<f64> = match &shift {
            Some(_) => st.activation.max.iter().zip(&st.activation.min).map(|(hi, lo)| (hi - lo) / 2.0).collect(),
            None => st.activation.absmax.clone(),
        };
        let a = affine::init_diagonal(&act_range, &st.weight_absmax, exponent)?.to_precision(transform_precision);
        let hidden = match kind {
            TransformKind::PerHead { head_dim } => head_dim,
            _ => d,
        };
        let schedule = MaskSchedule {
            target_epochs: epochs,
            stability_factor: alpha,
            hidden_size: hidden,
        };
        let shift = shift.map(|s| s.to_precision(transform_precision));
        transforms.insert(p, AffineTransform::new(p, kind, a, shift, schedule)?);
    }
    Ok(TransformSet {
        clips: init_clips(d, &config)?,
        config,
        transforms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, random_sdd};
    use crate::quant::{compute_qparams, fake_quant};

    /// Straight-line forward with no tape, used as an independent oracle.
    fn plain_forward(p: &BlockParams, x: &Tensor, wq: Option<QuantConfig>) -> Tensor {
        let w = |lin: Linear| {
            let w = p.weight(lin).clone();
            match wq {
                Some(cfg) => fake_quant(&w, &compute_qparams(&w, &cfg).unwrap()).unwrap(),
                None => w,
            }
        };
        let lin = |x: &Tensor, l: Linear| {
            let y = matmul(x, &w(l)).unwrap();
            let b = p.bias(l);
            Tensor::from_parts(
                y.shape().to_vec(),
                y.data().iter().enumerate().map(|(i, v)| v + b.data()[i % b.len()]).collect(),
                Precision::Double,
            )
        };
        let ln = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let c = x.cols();
            let mut out = Vec::new();
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                for j in 0..c {
                    out.push((row[j] - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j]);
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out, Precision::Double)
        };
        let d = p.hidden();
        let hd = p.head_dim();
        let t = x.rows();
        let h1 = ln(x, &p.ln1_gamma, &p.ln1_beta);
        let (q, k, v) = (lin(&h1, Linear::Q), lin(&h1, Linear::K), lin(&h1, Linear::V));
        let mut o = Tensor::zeros(&[t, d]);
        for h in 0..p.n_heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q.get(i, h * hd + c) * k.get(j, h * hd + c)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    let val: f64 = (0..=i).map(|j| e[j] / z * v.get(j, h * hd + c)).sum();
                    o.set(i, h * hd + c, val);
                }
            }
        }
        let hres = x.add(&lin(&o, Linear::Out)).unwrap();
        let h2 = ln(&hres, &p.ln2_gamma, &p.ln2_beta);
        let f = lin(&h2, Linear::Fc1).map(|v| v.max(0.0));
        hres.add(&lin(&f, Linear::Fc2)).unwrap()
    }

    fn fixture() -> (BlockParams, Vec<Tensor>) {
        let p = BlockParams::random(16, 2, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = (0..2).map(|_| random_normal(6, 16, &mut rng)).collect();
        (p, xs)
    }

    fn random_set(p: &BlockParams, cfg: &TransformPlacementConfig, seed: u64) -> TransformSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = TransformSet::identity(p, cfg).unwrap();
        let d = p.hidden();
        for (pl, t) in ts.transforms.iter_mut() {
            let a = match t.kind {
                TransformKind::Full => random_sdd(d, &mut rng),
                TransformKind::DiagonalOnly => Tensor::diag(&(0..d).map(|_| rng.random_range(0.3..3.0)).collect::<Vec<_>>()),
                TransformKind::PerHead { head_dim } => {
                    let full = random_sdd(d, &mut rng);
                    let mut m = Tensor::zeros(&[d, d]);
                    for i in 0..d {
                        for j in 0..d {
                            if i / head_dim == j / head_dim {
                                m.set(i, j, full.get(i, j));
                            }
                        }
                    }
                    m
                }
            };
            t.mask = affine::mask_for_kind(t.kind, d, 1, &MaskSchedule { target_epochs: 1, stability_factor: 1.0, hidden_size: d }).unwrap();
            t.matrix_a = a;
            if pl.follows_layer_norm() {
                t.shift_delta = Some(Tensor::vector(random_normal(1, d, &mut rng).into_data()));
            }
        }
        ts
    }

    #[test]
    fn full_precision_matches_plain_forward() {
        let (p, xs) = fixture();
        let y = block_forward(&p, &xs[0], &BlockMode::FullPrecision).unwrap();
        let oracle = plain_forward(&p, &xs[0], None);
        assert!(linalg::relative_fro_error(&oracle, &y).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_is_finite() {
        let (p, _) = fixture();
        let y = block_forward(&p, &Tensor::zeros(&[4, 16]), &BlockMode::FullPrecision).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn identity_transform_with_on_grid_weights_is_exact() {
        let (mut p, xs) = fixture();
        // entries in {-1, 0, 1} with both signs per column sit on the
        // symmetric 2-bit grid with step 1
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in p.weights.values_mut() {
            let (r, c) = (w.rows(), w.cols());
            let mut m = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    m.set(i, j, [-1.0, 0.0, 1.0][rng.random_range(0..3)]);
                }
            }
            for j in 0..c {
                m.set(0, j, 1.0);
                m.set(1, j, -1.0);
            }
            *w = m;
        }
        let cfg = TransformPlacementConfig {
            shift: false,
            weight_quant: Some(QuantConfig { bits: 2, symmetric: true, learnable_clip: false, ..QuantConfig::weight(2) }),
            ..TransformPlacementConfig::full(None)
        };
        let ts = TransformSet::identity(&p, &cfg).unwrap();
        let a = block_forward(&p, &xs[0], &BlockMode::FullPrecision).unwrap();
        let b = block_forward(&p, &xs[0], &BlockMode::TransformedQuantized(&ts)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_transform_loss_equals_round_to_nearest() {
        let (p, xs) = fixture();
        let wq = QuantConfig { learnable_clip: false, ..QuantConfig::weight(4) };
        let cfg = TransformPlacementConfig { shift: false, ..TransformPlacementConfig::full(Some(wq)) };
        let ts = TransformSet::identity(&p, &cfg).unwrap();
        let loss = block_loss(&p, &xs, &BlockMode::TransformedQuantized(&ts)).unwrap();
        let oracle: f64 = xs
            .iter()
            .map(|x| {
                let d = plain_forward(&p, x, None).sub(&plain_forward(&p, x, Some(wq))).unwrap();
                linalg::frobenius_norm_sq(&d)
            })
            .sum::<f64>()
            / xs.len() as f64;
        assert!(loss > 0.0);
        assert!((loss - oracle).abs() <= 1e-10 * oracle, "{loss} vs {oracle}");
    }

    #[test]
    fn loss_of_identical_modes_is_zero() {
        let (p, xs) = fixture();
        assert_eq!(block_loss(&p, &xs, &BlockMode::FullPrecision).unwrap(), 0.0);
    }

    #[test]
    fn transforms_without_quantization_preserve_output() {
        let (p, xs) = fixture();
        let cfg = TransformPlacementConfig::full(None);
        for seed in 0..5 {
            let ts = random_set(&p, &cfg, seed);
            let a = block_forward(&p, &xs[0], &BlockMode::FullPrecision).unwrap();
            let b = block_forward(&p, &xs[0], &BlockMode::TransformedQuantized(&ts)).unwrap();
            assert!(linalg::relative_fro_error(&a, &b).unwrap() < 1e-8);
        }
    }

    #[test]
    fn per_head_transform_keeps_heads_separate() {
        let (p, xs) = fixture();
        let cfg = TransformPlacementConfig {
            pre_qkv: PlacementKind::None,
            pre_fc1: PlacementKind::None,
            ..TransformPlacementConfig::full(None)
        };
        let ts = random_set(&p, &cfg, 9);
        // zero head 1's value projection: its contribution vanishes in both modes
        let mut pz = p.clone();
        let w = pz.weights.get_mut(&Linear::V).unwrap();
        for i in 0..16 {
            for j in 8..16 {
                w.set(i, j, 0.0);
            }
        }
        pz.biases.insert(Linear::V, Tensor::vector(
            p.bias(Linear::V).data().iter().enumerate().map(|(j, v)| if j >= 8 { 0.0 } else { *v }).collect(),
        ));
        let bg = build_graph(&pz, BuildSpec::from_mode(&BlockMode::TransformedQuantized(&ts)), false);
        let ev = bg.graph.forward(&bg.bind_input(&xs[0])).unwrap();
        let o = ev.value(bg.taps["pre_out_proj"]);
        let a_star = bg.effective[&Placement::PreOutProj];
        let inv = linalg::lu_invert(ev.value(a_star), PrecisionScheme::Double).unwrap().0;
        let ot = matmul(o, &inv).unwrap();
        for r in 0..ot.rows() {
            for j in 8..16 {
                assert_eq!(ot.get(r, j), 0.0);
            }
        }
    }

    #[test]
    fn singular_transform_names_placement() {
        let (p, xs) = fixture();
        let mut ts = TransformSet::identity(&p, &TransformPlacementConfig::full(None)).unwrap();
        ts.transforms.get_mut(&Placement::PreFc1).unwrap().matrix_a = Tensor::zeros(&[16, 16]);
        match block_forward(&p, &xs[0], &BlockMode::TransformedQuantized(&ts)) {
            Err(Error::SingularTransform { placement, .. }) => assert_eq!(placement, "pre_fc1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TransformPlacementConfig::default();
        c.pre_qkv = PlacementKind::PerHead;
        assert!(c.resolve().is_err());
        let mut c = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
        c.act_quant = Some(QuantConfig::activation(4));
        let r = c.resolve().unwrap();
        assert_eq!(r.pre_qkv, PlacementKind::DiagonalOnly);
        assert_eq!(r.pre_fc1, PlacementKind::DiagonalOnly);
        assert_eq!(r.pre_out_proj, PlacementKind::PerHead);
        let err = serde_json::from_str::<TransformPlacementConfig>(
            r#"{"pre_qkv":"full","pre_out_proj":"none","pre_fc1":"full","pre_fc2":"full","weight_quant":null}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn stats_examples() {
        let (p, _) = fixture();
        let ones = Tensor::full(&[3, 16], 1.0);
        let s = collect_stats(&p, &[ones]).unwrap();
        assert!(s.input.absmax.iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_normal(5, 16, &mut rng);
        let b = random_normal(5, 16, &mut rng);
        let both = collect_stats(&p, &[a.clone(), b.clone()]).unwrap();
        let sa = collect_stats(&p, std::slice::from_ref(&a)).unwrap();
        let sb = collect_stats(&p, std::slice::from_ref(&b)).unwrap();
        for pl in Placement::ALL {
            let (x, y, z) = (&both.placements[&pl].activation, &sa.placements[&pl].activation, &sb.placements[&pl].activation);
            for j in 0..16 {
                assert_eq!(x.max[j], y.max[j].max(z.max[j]));
                assert_eq!(x.min[j], y.min[j].min(z.min[j]));
            }
        }
        // scan oracle on the first LayerNorm output
        let ln1 = build_graph(&p, BuildSpec::full_precision(), false);
        let mut absmax = vec![0.0f64; 16];
        for x in [&a, &b] {
            let ev = ln1.graph.forward(&ln1.bind_input(x)).unwrap();
            let v = ev.value(ln1.taps["pre_qkv"]);
            for r in 0..v.rows() {
                for j in 0..16 {
                    absmax[j] = absmax[j].max(v.get(r, j).abs());
                }
            }
        }
        assert_eq!(both.placements[&Placement::PreQkv].activation.absmax, absmax);
    }

    #[test]
    fn named_round_trip() {
        let (p, _) = fixture();
        let map: BTreeMap<_, _> = p.named_tensors("block0.").into_iter().collect();
        assert_eq!(BlockParams::from_named(&map, "block0.").unwrap(), p);
    }

    #[test]
    fn single_precision_equivalence() {
        let (p, xs) = fixture();
        let cfg = TransformPlacementConfig::full(None);
        let ts = random_set(&p, &cfg, 4);
        let ps = p.to_precision(Precision::Single);
        let x = xs[0].to_precision(Precision::Single);
        let a = block_forward(&ps, &x, &BlockMode::FullPrecision).unwrap();
        // transforms kept in double: promoted products
        let b = block_forward(&ps, &x, &BlockMode::TransformedQuantized(&ts)).unwrap();
        assert_eq!(b.precision(), Precision::Single);
        assert!(linalg::relative_fro_error(&a, &b).unwrap() < 1e-3);
    }
}
