//! Block-wise calibration: per-epoch mask refresh, tape gradients of the
//! block loss, Adam steps on the masked gradients, dominance checks and the
//! stability-factor bound.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::affine::{self, GradHistory, Placement, TransformKind, DEFAULT_MIGRATION_EXPONENT};
use crate::block::{
    self, build_graph, collect_stats, init_transforms, BlockMode, BlockParams, BuildSpec, TransformPlacementConfig,
    TransformSet,
};
use crate::error::{Error, Result};
use crate::linalg::{self, random_normal, PrecisionScheme};
use crate::tensor::{Precision, Tensor};

/// Hidden sizes up to this use a stability factor of 1 by default.
pub const SMALL_MODEL_HIDDEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NextBlockInput {
    FullPrecision,
    Quantized,
}

/// When Adam steps happen within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    /// One step per epoch on the loss averaged over all batches.
    PerEpoch,
    /// One step per calibration batch, in batch order.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    /// Epochs for the final block of a multi-block model.
    pub last_block_epochs: Option<usize>,
    pub lr_affine: f64,
    pub lr_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stability factor; `None` picks 1 for small models and 1e-2 otherwise.
    pub alpha: Option<f64>,
    /// Clip the stability factor to 0.9 of the running bound each epoch.
    pub enforce_alpha_bound: bool,
    pub seed: u64,
    pub next_block_input: NextBlockInput,
    pub precision: PrecisionScheme,
    pub migration_exponent: f64,
    pub step: StepSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epochs: 20,
            last_block_epochs: None,
            lr_affine: 5e-3,
            lr_clip: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: None,
            enforce_alpha_bound: true,
            seed: 42,
            next_block_input: NextBlockInput::FullPrecision,
            precision: PrecisionScheme::Double,
            migration_exponent: DEFAULT_MIGRATION_EXPONENT,
            step: StepSchedule::PerBatch,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.last_block_epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [("lr_affine", self.lr_affine), ("lr_clip", self.lr_clip)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be a non-negative number, got {a}")));
            }
        }
        if !(0.0..=1.0).contains(&self.migration_exponent) {
            return Err(Error::Config("migration_exponent must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn resolved_alpha(&self, hidden: usize) -> f64 {
        self.alpha
            .unwrap_or(if hidden <= SMALL_MODEL_HIDDEN { 1.0 } else { 1e-2 })
    }
}

/// State of one transform at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub placement: Placement,
    pub loss: f64,
    pub is_sdd: bool,
    /// Stability factor the mask used this epoch.
    pub alpha: f64,
    /// `None` when every row is unbounded.
    pub alpha_bound_global: Option<f64>,
    pub condition_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub block: usize,
    pub label: String,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub records: Vec<EpochRecord>,
    /// Dominance of the final effective matrices.
    pub final_is_sdd: BTreeMap<Placement, bool>,
    /// Epochs after which a placement's stability factor was halved.
    pub alpha_halvings: Vec<(usize, Placement)>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl OptimizationReport {
    pub fn all_sdd(&self) -> bool {
        self.records.iter().all(|r| r.is_sdd) && self.final_is_sdd.values().all(|&b| b)
    }

    /// `block,epoch,placement,loss,is_sdd,alpha,alpha_bound,condition`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,epoch,placement,loss,is_sdd,alpha,alpha_bound,condition\n");
        if self.records.is_empty() {
            for (i, l) in self.epoch_loss.iter().enumerate() {
                s.push_str(&format!("{},{},none,{l:e},true,0,,\n", self.block, i + 1));
            }
        }
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{:e},{},{:e},{},{:e}\n",
                self.block,
                r.epoch,
                r.placement,
                r.loss,
                r.is_sdd,
                r.alpha,
                r.alpha_bound_global.map(|b| format!("{b:e}")).unwrap_or_default(),
                r.condition_estimate
            ));
        }
        s
    }
}

pub struct BlockResult {
    pub transforms: TransformSet,
    pub report: OptimizationReport,
}

struct BatchEval {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
}

fn label(ts: &TransformSet) -> String {
    let affine = ts
        .transforms
        .values()
        .any(|t| t.kind != TransformKind::DiagonalOnly && t.schedule.stability_factor > 0.0);
    if affine { "affine" } else { "diagonal-only" }.to_string()
}

/// Loss and gradients at the current transforms, averaged over batches in
/// batch order.
fn evaluate(
    params: &BlockParams,
    ts: &TransformSet,
    batches: &[Tensor],
    targets: &[Tensor],
    with_grad: bool,
) -> Result<BatchEval> {
    let bg = build_graph(params, BuildSpec::from_mode(&BlockMode::TransformedQuantized(ts)), true);
    let evals: Vec<BatchEval> = batches
        .par_iter()
        .zip(targets)
        .map(|(x, t)| {
            let mut b = bg.bind_input(x);
            b.insert("target".into(), t.clone());
            let ev = bg.graph.forward(&b)?;
            let loss = ev.root().data()[0];
            let mut grads = BTreeMap::new();
            if with_grad && loss.is_finite() {
                let g = bg.graph.backward(&ev)?;
                for (p, id) in &bg.effective {
                    if let Some(t) = g.node(*id) {
                        grads.insert(format!("a.{p}"), t.clone());
                    }
                }
                for (name, t) in g.leaves() {
                    if !name.starts_with("a.") {
                        grads.insert(name.clone(), t.clone());
                    }
                }
            }
            Ok(BatchEval { loss, grads })
        })
        .collect::<Result<_>>()?;
    let n = evals.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in evals {
        loss += e.loss;
        for (k, g) in e.grads {
            let g = g.to_precision(Precision::Double);
            match grads.get_mut(&k) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    grads.insert(k, g);
                }
            }
        }
    }
    for g in grads.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok(BatchEval { loss: loss / n, grads })
}

/// Applies the stability-factor policy at `epoch` and refreshes masks.
fn refresh_masks(
    ts: &mut TransformSet,
    epoch: usize,
    alpha: &BTreeMap<Placement, f64>,
    histories: &BTreeMap<Placement, GradHistory>,
    init_diag: &BTreeMap<Placement, Vec<f64>>,
    enforce: bool,
) -> Result<BTreeMap<Placement, Option<f64>>> {
    let mut bounds = BTreeMap::new();
    for (p, t) in ts.transforms.iter_mut() {
        let bound = affine::alpha_bound(&init_diag[p], &histories[p])?.global_bound;
        let mut a = if t.kind == TransformKind::DiagonalOnly { 0.0 } else { alpha[p] };
        if enforce {
            if let Some(b) = bound {
                a = a.min(0.9 * b);
            }
        }
        t.schedule.stability_factor = a;
        t.mask = t.mask_at(epoch)?;
        bounds.insert(*p, bound);
    }
    Ok(bounds)
}

fn condition_estimate(m: &Tensor) -> f64 {
    let scheme = match m.precision() {
        Precision::Double => PrecisionScheme::Double,
        Precision::Single => PrecisionScheme::Float,
    };
    linalg::lu_invert(m, scheme).map_or(f64::INFINITY, |(_, d)| d.condition_estimate)
}

/// One Adam step on every trainable tensor from averaged gradients.
fn apply_step(
    ts: &mut TransformSet,
    grads: &BTreeMap<String, Tensor>,
    states: &mut BTreeMap<String, AdamState>,
    histories: &mut BTreeMap<Placement, GradHistory>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let adam = cfg.adam();
    for (p, t) in ts.transforms.iter_mut() {
        let d = t.dim();
        let key = format!("a.{p}");
        if let Some(g) = grads.get(&key) {
            let st = states.entry(key).or_insert_with(|| AdamState::new(d * d));
            let g = g.to_precision(t.matrix_a.precision());
            let before = t.matrix_a.clone();
            t.matrix_a = affine::masked_update(&t.matrix_a, &t.mask, &g, cfg.lr_affine, st, &adam)?;
            histories.get_mut(p).expect("placement").record_update(&before, &t.matrix_a)?;
        }
        let key = format!("shift.{p}");
        if let (Some(s), Some(g)) = (t.shift_delta.as_mut(), grads.get(&key)) {
            let st = states.entry(key).or_insert_with(|| AdamState::new(d));
            let row = st.step(&s.as_row(), &g.to_precision(s.precision()), cfg.lr_affine, &adam)?;
            *s = Tensor::new(vec![d], row.into_data(), s.precision())?;
        }
    }
    for (lin, c) in ts.clips.iter_mut() {
        for (side, t) in [("clip_lo", &mut c.lo), ("clip_hi", &mut c.hi)] {
            let key = format!("{side}.{}", lin.name());
            if let Some(g) = grads.get(&key) {
                let st = states.entry(key).or_insert_with(|| AdamState::new(t.len()));
                *t = st.step(t, g, cfg.lr_clip, &adam)?;
            }
        }
    }
    Ok(())
}

/// Optimizes the transforms of one block against its full-precision output.
pub fn optimize_block(
    block_index: usize,
    params: &BlockParams,
    calib: &[Tensor],
    placement: &TransformPlacementConfig,
    cfg: &OptimizerConfig,
) -> Result<BlockResult> {
    let epochs = cfg.epochs;
    optimize_block_epochs(block_index, params, calib, placement, cfg, epochs)
}

fn optimize_block_epochs(
    block_index: usize,
    params: &BlockParams,
    calib: &[Tensor],
    placement: &TransformPlacementConfig,
    cfg: &OptimizerConfig,
    epochs: usize,
) -> Result<BlockResult> {
    let started = Instant::now();
    cfg.validate()?;
    params.validate()?;
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let ps = cfg.precision.storage();
    let pt = cfg.precision.transform();
    let stats = collect_stats(params, calib)?;
    let params = params.to_precision(ps);
    let batches: Vec<Tensor> = calib.iter().map(|x| x.to_precision(ps)).collect();
    let alpha0 = cfg.resolved_alpha(params.hidden());
    let mut ts = init_transforms(&params, &stats, placement, epochs, alpha0, cfg.migration_exponent, pt)?;

    let fp = build_graph(&params, BuildSpec::full_precision(), false);
    let targets: Vec<Tensor> = batches.par_iter().map(|x| fp.eval(x)).collect::<Result<_>>()?;

    let d = params.hidden();
    let mut alpha: BTreeMap<Placement, f64> = ts.transforms.keys().map(|p| (*p, alpha0)).collect();
    let mut histories: BTreeMap<Placement, GradHistory> =
        ts.transforms.keys().map(|p| (*p, GradHistory::new(d, cfg.lr_affine))).collect();
    let init_diag: BTreeMap<Placement, Vec<f64>> =
        ts.transforms.iter().map(|(p, t)| (*p, t.matrix_a.diagonal())).collect();
    let mut states: BTreeMap<String, AdamState> = BTreeMap::new();

    let mut report = OptimizationReport {
        block: block_index,
        label: label(&ts),
        epochs,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        epoch_loss: Vec::with_capacity(epochs),
        records: Vec::new(),
        final_is_sdd: BTreeMap::new(),
        alpha_halvings: Vec::new(),
        wall_time_secs: 0.0,
    };

    for epoch in 1..=epochs {
        let bounds = refresh_masks(&mut ts, epoch, &alpha, &histories, &init_diag, cfg.enforce_alpha_bound)?;
        ts.check_invertible().map_err(|e| Error::SingularAtEpoch {
            block: block_index,
            epoch,
            source: Box::new(e),
        })?;
        let per_epoch = cfg.step == StepSchedule::PerEpoch;
        let singular = |e: Error| match e {
            Error::Singular { .. } => Error::SingularAtEpoch {
                block: block_index,
                epoch,
                source: Box::new(e),
            },
            other => other,
        };
        let eval = evaluate(&params, &ts, &batches, &targets, per_epoch).map_err(singular)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                block: block_index,
                epoch,
            });
        }
        if epoch == 1 {
            report.initial_loss = eval.loss;
        }
        report.epoch_loss.push(eval.loss);
        log::debug!("block {block_index} epoch {epoch}: loss {:.6e}", eval.loss);

        for (p, t) in ts.transforms.iter() {
            let a_star = t.effective()?;
            let is_sdd = linalg::is_strictly_diagonally_dominant(&a_star);
            if !is_sdd {
                log::warn!(
                    "block {block_index} {p}: effective matrix lost diagonal dominance at epoch {epoch} (alpha {}); halving alpha",
                    t.schedule.stability_factor
                );
                let a = alpha.get_mut(p).expect("placement");
                *a = t.schedule.stability_factor / 2.0;
                report.alpha_halvings.push((epoch, *p));
            }
            report.records.push(EpochRecord {
                epoch,
                placement: *p,
                loss: eval.loss,
                is_sdd,
                alpha: t.schedule.stability_factor,
                alpha_bound_global: bounds[p],
                condition_estimate: condition_estimate(&a_star),
            });
        }

        if per_epoch {
            apply_step(&mut ts, &eval.grads, &mut states, &mut histories, cfg)?;
        } else {
            for (i, (x, t)) in batches.iter().zip(&targets).enumerate() {
                if i > 0 {
                    refresh_masks(&mut ts, epoch, &alpha, &histories, &init_diag, cfg.enforce_alpha_bound)?;
                    ts.check_invertible().map_err(singular)?;
                }
                let ev = evaluate(&params, &ts, std::slice::from_ref(x), std::slice::from_ref(t), true)
                    .map_err(singular)?;
                if !ev.loss.is_finite() {
                    return Err(Error::Diverged {
                        block: block_index,
                        epoch,
                    });
                }
                apply_step(&mut ts, &ev.grads, &mut states, &mut histories, cfg)?;
            }
        }
    }

    // the final matrices see the last mask under the same policy
    refresh_masks(&mut ts, epochs, &alpha, &histories, &init_diag, cfg.enforce_alpha_bound)?;
    for (p, t) in &ts.transforms {
        report.final_is_sdd.insert(*p, t.is_sdd()?);
    }
    ts.check_invertible().map_err(|e| Error::SingularAtEpoch {
        block: block_index,
        epoch: epochs,
        source: Box::new(e),
    })?;
    let fin = evaluate(&params, &ts, &batches, &targets, false)?;
    if !fin.loss.is_finite() {
        return Err(Error::Diverged {
            block: block_index,
            epoch: epochs,
        });
    }
    report.final_loss = fin.loss;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    log::info!(
        "block {block_index}: loss {:.6e} -> {:.6e} in {:.2}s",
        report.initial_loss,
        report.final_loss,
        report.wall_time_secs
    );
    Ok(BlockResult { transforms: ts, report })
}

/// Optimizes blocks in order, feeding each block the previous block's
/// output in the configured mode.
pub fn optimize_model(
    blocks: &[BlockParams],
    calib: &[Tensor],
    placement: &TransformPlacementConfig,
    cfg: &OptimizerConfig,
) -> Result<Vec<BlockResult>> {
    if blocks.is_empty() {
        return Err(Error::Config("model has no blocks".into()));
    }
    let mut inputs: Vec<Tensor> = calib.to_vec();
    let mut out = Vec::with_capacity(blocks.len());
    for (i, params) in blocks.iter().enumerate() {
        let epochs = match cfg.last_block_epochs {
            Some(t) if i + 1 == blocks.len() && blocks.len() > 1 => t,
            _ => cfg.epochs,
        };
        let res = optimize_block_epochs(i, params, &inputs, placement, cfg, epochs)?;
        if i + 1 < blocks.len() {
            let ps = cfg.precision.storage();
            let pp = params.to_precision(ps);
            let mode = match cfg.next_block_input {
                NextBlockInput::FullPrecision => BlockMode::FullPrecision,
                NextBlockInput::Quantized => BlockMode::TransformedQuantized(&res.transforms),
            };
            inputs = inputs
                .par_iter()
                .map(|x| block::block_forward(&pp, &x.to_precision(ps), &mode).map(|y| y.to_precision(Precision::Double)))
                .collect::<Result<_>>()?;
        }
        out.push(res);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub final_loss: Option<f64>,
    pub ce_gap: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Pearson correlation of final loss and CE gap over non-diverged rows,
    /// present when there are at least three.
    pub pearson: Option<f64>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,final_loss,ce_gap,diverged\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "NaN".into());
        for r in &self.rows {
            s.push_str(&format!("{:e},{},{},{}\n", r.alpha, f(r.final_loss), f(r.ce_gap), r.diverged));
        }
        s
    }
}

pub struct SweepResult {
    pub table: SweepTable,
    /// Learned transforms per row; `None` for diverged rows.
    pub transforms: Vec<Option<TransformSet>>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let den = (sxx * syy).sqrt();
    (den > 0.0).then(|| sxy / den)
}

/// Vocabulary of the seeded output head used to score the sweep.
pub const SWEEP_VOCAB: usize = 128;

/// Mean KL divergence per token from the full-precision to the quantized
/// next-token distribution under a seeded random output head. This is the
/// cross-entropy of the quantized model against full-precision targets
/// minus the targets' own entropy.
pub fn ce_gap(params: &BlockParams, ts: &TransformSet, heldout: &[Tensor], seed: u64) -> Result<f64> {
    let d = params.hidden();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = random_normal(d, SWEEP_VOCAB, &mut rng).scale(1.0 / (d as f64).sqrt());
    let mut total = 0.0;
    let mut tokens = 0usize;
    for x in heldout {
        let fp = block::block_forward(params, x, &BlockMode::FullPrecision)?.to_precision(Precision::Double);
        let q = block::block_forward(params, x, &BlockMode::TransformedQuantized(ts))?.to_precision(Precision::Double);
        let lf = linalg::matmul(&fp, &head)?;
        let lq = linalg::matmul(&q, &head)?;
        for r in 0..lf.rows() {
            let pf = log_softmax(lf.row(r));
            let pq = log_softmax(lq.row(r));
            total += pf.iter().zip(&pq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            tokens += 1;
        }
    }
    Ok(total / tokens.max(1) as f64)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// One run per stability factor with the bound enforcement off, scored by
/// final block loss and downstream CE gap on `heldout`.
pub fn alpha_sweep(
    params: &BlockParams,
    calib: &[Tensor],
    heldout: &[Tensor],
    placement: &TransformPlacementConfig,
    cfg: &OptimizerConfig,
    alphas: &[f64],
) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    let mut transforms = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let run_cfg = OptimizerConfig {
            alpha: Some(a),
            enforce_alpha_bound: false,
            ..cfg.clone()
        };
        match optimize_block(0, params, calib, placement, &run_cfg) {
            Ok(res) => {
                let ps = cfg.precision.storage();
                let pp = params.to_precision(ps);
                let held: Vec<Tensor> = heldout.iter().map(|x| x.to_precision(ps)).collect();
                let gap = ce_gap(&pp, &res.transforms, &held, cfg.seed)?;
                rows.push(SweepRow {
                    alpha: a,
                    final_loss: Some(res.report.final_loss),
                    ce_gap: Some(gap),
                    diverged: false,
                });
                transforms.push(Some(res.transforms));
            }
            Err(e) if e.is_numerical() => {
                log::warn!("alpha {a}: {e}");
                rows.push(SweepRow {
                    alpha: a,
                    final_loss: None,
                    ce_gap: None,
                    diverged: true,
                });
                transforms.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| !r.diverged).collect();
    let pearson = if ok.len() >= 3 {
        let xs: Vec<f64> = ok.iter().filter_map(|r| r.final_loss).collect();
        let ys: Vec<f64> = ok.iter().filter_map(|r| r.ce_gap).collect();
        pearson(&xs, &ys)
    } else {
        None
    };
    Ok(SweepResult {
        table: SweepTable { rows, pearson },
        transforms,
    })
}

/// Seeded Gaussian batches of `tokens x d`.
pub fn synthetic_batches(seed: u64, batches: usize, tokens: usize, d: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batches).map(|_| random_normal(tokens, d, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::PlacementKind;
    use crate::quant::QuantConfig;

    fn fixture() -> (BlockParams, Vec<Tensor>) {
        (BlockParams::random(16, 2, 42).unwrap(), synthetic_batches(42, 2, 12, 16))
    }

    fn cfg(epochs: usize, alpha: f64) -> OptimizerConfig {
        OptimizerConfig {
            epochs,
            alpha: Some(alpha),
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (p, xs) = fixture();
        let c = OptimizerConfig {
            lr_affine: 0.0,
            lr_clip: 0.0,
            ..cfg(4, 1e-2)
        };
        let pl = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
        let r = optimize_block(0, &p, &xs, &pl, &c).unwrap();
        let init = init_transforms(&p, &collect_stats(&p, &xs).unwrap(), &pl, 4, 1e-2, 0.5, Precision::Double).unwrap();
        for (pl, t) in &r.transforms.transforms {
            assert_eq!(t.matrix_a, init.transforms[pl].matrix_a);
        }
        assert!(r.report.epoch_loss.iter().all(|&l| l == r.report.initial_loss));
    }

    #[test]
    fn zero_alpha_stays_diagonal_and_matches_diagonal_kind() {
        let (p, xs) = fixture();
        let pl = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
        let a = optimize_block(0, &p, &xs, &pl, &cfg(5, 0.0)).unwrap();
        for t in a.transforms.transforms.values() {
            let m = &t.matrix_a;
            for i in 0..16 {
                for j in 0..16 {
                    if i != j {
                        assert_eq!(m.get(i, j), 0.0);
                    }
                }
            }
        }
        let diag = TransformPlacementConfig {
            pre_qkv: PlacementKind::DiagonalOnly,
            pre_out_proj: PlacementKind::DiagonalOnly,
            pre_fc1: PlacementKind::DiagonalOnly,
            ..pl
        };
        let b = optimize_block(0, &p, &xs, &diag, &cfg(5, 0.0)).unwrap();
        let bits = |r: &BlockResult| r.report.epoch_loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.report.final_loss.to_bits(), b.report.final_loss.to_bits());
        assert_eq!(a.report.label, "diagonal-only");
    }

    #[test]
    fn optimization_reduces_loss() {
        let (p, xs) = fixture();
        let pl = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
        let r = optimize_block(0, &p, &xs, &pl, &cfg(20, 1e-2)).unwrap();
        assert!(r.report.final_loss < r.report.initial_loss, "{:?}", r.report.epoch_loss);
        assert!(r.report.all_sdd());
        assert_eq!(r.report.records.len(), 20 * 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let (p, xs) = fixture();
        let pl = TransformPlacementConfig::default();
        let a = optimize_block(0, &p, &xs, &pl, &cfg(3, 1.0)).unwrap();
        let b = optimize_block(0, &p, &xs, &pl, &cfg(3, 1.0)).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    }

    #[test]
    fn chaining_modes() {
        let (p, xs) = fixture();
        let pl = TransformPlacementConfig::default();
        let c = cfg(2, 1.0);
        let single = optimize_model(std::slice::from_ref(&p), &xs, &pl, &c).unwrap();
        let direct = optimize_block(0, &p, &xs, &pl, &c).unwrap();
        assert_eq!(single[0].report, OptimizationReport { wall_time_secs: single[0].report.wall_time_secs, ..direct.report });

        let blocks = vec![p.clone(), BlockParams::random(16, 2, 7).unwrap()];
        let fp = optimize_model(&blocks, &xs, &pl, &c).unwrap();
        let q = optimize_model(
            &blocks,
            &xs,
            &pl,
            &OptimizerConfig {
                next_block_input: NextBlockInput::Quantized,
                ..c.clone()
            },
        )
        .unwrap();
        assert_eq!(fp[0].report.initial_loss, q[0].report.initial_loss);
        assert_ne!(fp[1].report.initial_loss, q[1].report.initial_loss);
    }

    #[test]
    fn alpha_sweep_rows() {
        let (p, xs) = fixture();
        let held = synthetic_batches(1, 1, 8, 16);
        let pl = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
        let r = alpha_sweep(&p, &xs, &held, &pl, &cfg(3, 0.0), &[0.0]).unwrap();
        assert_eq!(r.table.rows.len(), 1);
        assert!(r.table.pearson.is_none());
        let r = alpha_sweep(&p, &xs, &held, &pl, &cfg(3, 0.0), &[1e-2, 1e-2, 0.0]).unwrap();
        assert_eq!(r.table.rows[0], r.table.rows[1]);
        assert!(r.table.rows.iter().all(|row| row.ce_gap.unwrap() >= 0.0));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }
}
