//! Folding learned transforms into the block's own parameters, and the
//! merge-error experiment comparing the three precision schemes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::Placement;
use crate::block::{build_graph, BlockMode, BlockParams, BuildSpec, Linear, TransformSet};
use crate::error::{Error, Result};
use crate::linalg::{self, random_normal, random_sdd, PrecisionScheme};
use crate::quant::{self, sigmoid, QuantConfig, QuantParams, QuantizedTensor};
use crate::tensor::{Precision, Tensor};

/// A block whose weights already carry the transforms and quantization.
/// Running it costs exactly what the untransformed block costs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBlock {
    pub params: BlockParams,
    /// Dynamic activation quantization, kept at the same points as during
    /// calibration.
    pub act_quant: Option<QuantConfig>,
    /// Grid parameters of every weight that sits on a quantization grid.
    /// The value projection is absent when a pre-out-proj transform was
    /// folded into it, since that makes it dense.
    pub qparams: BTreeMap<Linear, QuantParams>,
}

impl FusedBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let spec = BuildSpec {
            transforms: None,
            weight_quant: None,
            act_quant: self.act_quant,
        };
        build_graph(&self.params, spec, false).eval(x)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Integer codes for every on-grid weight.
    pub fn quantized_weights(&self) -> Result<BTreeMap<Linear, QuantizedTensor>> {
        self.qparams
            .iter()
            .map(|(lin, qp)| Ok((*lin, quant::quantize_export(self.params.weight(*lin), qp)?)))
            .collect()
    }

    /// Linears whose fused weight is not on a grid.
    pub fn dense_linears(&self) -> Vec<Linear> {
        Linear::ALL.into_iter().filter(|l| !self.qparams.contains_key(l)).collect()
    }
}

/// `A W`: a diagonal `A` scales the rows of `W`.
pub fn fold_weight(a_eff: &Tensor, w: &Tensor) -> Result<Tensor> {
    linalg::matmul(a_eff, w)
}

/// LayerNorm affine parameters that absorb a following `(x - delta) / a`.
pub fn fold_layer_norm(gamma: &Tensor, beta: &Tensor, a_diag: &[f64], delta: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let d = gamma.len();
    if beta.len() != d || a_diag.len() != d || delta.is_some_and(|s| s.len() != d) {
        return Err(Error::shape("layer norm fold: parameter lengths differ"));
    }
    let p = gamma.precision();
    let mut g = Vec::with_capacity(d);
    let mut b = Vec::with_capacity(d);
    for i in 0..d {
        let s = delta.map_or(0.0, |t| t.data()[i]);
        g.push(gamma.data()[i] / a_diag[i]);
        b.push((beta.data()[i] - s) / a_diag[i]);
    }
    Ok((Tensor::new(gamma.shape().to_vec(), g, p)?, Tensor::new(beta.shape().to_vec(), b, p)?))
}

fn diagonal_of(p: Placement, a: &Tensor) -> Result<Vec<f64>> {
    let n = a.rows();
    for i in 0..n {
        for j in 0..n {
            if i != j && a.get(i, j) != 0.0 {
                return Err(Error::Config(format!(
                    "{p}: effective transform has off-diagonal entries and cannot fold into LayerNorm"
                )));
            }
        }
    }
    Ok(a.diagonal())
}

struct Folder<'a> {
    params: &'a BlockParams,
    ts: &'a TransformSet,
    ps: Precision,
}

impl Folder<'_> {
    /// `(A W, b + delta W)` in storage precision, or the raw pair when the
    /// placement is inactive. Products run in the transform's precision.
    fn transformed(&self, lin: Linear) -> Result<(Tensor, Tensor)> {
        let w = self.params.weight(lin);
        let b = self.params.bias(lin);
        let Some(t) = lin.placement().and_then(|p| self.ts.transform(p)) else {
            return Ok((w.clone(), b.clone()));
        };
        let pt = t.matrix_a.precision();
        let wt = w.to_precision(pt);
        let aw = linalg::matmul(&t.effective()?, &wt)?.to_precision(self.ps);
        let b = match &t.shift_delta {
            Some(s) => {
                let sw = linalg::matmul(&s.as_row(), &wt)?.to_precision(self.ps);
                b.as_row().add(&sw)?
            }
            None => b.as_row(),
        };
        Ok((aw, Tensor::vector(b.into_data()).to_precision(self.ps)))
    }

    /// Fake-quantizes with the learned clips, exactly as the calibration
    /// graph does.
    fn quantize(&self, lin: Linear, w: &Tensor) -> Result<Option<(Tensor, QuantParams)>> {
        let Some(cfg) = self.ts.config.weight_quant else {
            return Ok(None);
        };
        let groups = cfg.group_count(w.rows(), w.cols())?;
        let (lo, hi) = match self.ts.clips.get(&lin).filter(|_| cfg.learnable_clip) {
            Some(c) => (
                c.lo.data().iter().map(|&v| sigmoid(v)).collect(),
                c.hi.data().iter().map(|&v| sigmoid(v)).collect(),
            ),
            None => (vec![1.0; groups], vec![1.0; groups]),
        };
        let qp = quant::compute_qparams_clipped(w, &cfg, &lo, &hi)?;
        Ok(Some((quant::fake_quant(w, &qp)?, qp)))
    }
}

/// Rewrites the block so that its plain forward reproduces the
/// transformed-quantized forward:
///
/// - LayerNorm placements: `gamma / a`, `(beta - delta) / a`; the consuming
///   weights become `Q(A W)` with bias `b + delta W`.
/// - Before the output projection: `A^-1` is folded into the value
///   projection (`Q(W_v) A^-1`, `b_v A^-1`), which is exact because the
///   attention probabilities act on token rows and `A` only mixes channels
///   within a head. The output projection becomes `Q(A W_out)`.
///
/// The effective matrices are always `A ∘ GM` at the final epoch.
pub fn fuse_block(params: &BlockParams, ts: &TransformSet) -> Result<FusedBlock> {
    params.validate()?;
    ts.check_invertible()?;
    let f = Folder {
        params,
        ts,
        ps: params.precision(),
    };
    let mut out = params.clone();
    let mut qparams = BTreeMap::new();

    for lin in Linear::ALL {
        let (w, b) = f.transformed(lin)?;
        let w = match f.quantize(lin, &w)? {
            Some((wq, qp)) => {
                qparams.insert(lin, qp);
                wq
            }
            None => w,
        };
        out.weights.insert(lin, w);
        out.biases.insert(lin, b);
    }

    for (p, gamma, beta) in [
        (Placement::PreQkv, &mut out.ln1_gamma, &mut out.ln1_beta),
        (Placement::PreFc1, &mut out.ln2_gamma, &mut out.ln2_beta),
    ] {
        let Some(t) = ts.transform(p) else { continue };
        let a = t.effective()?.to_precision(Precision::Double);
        let diag = diagonal_of(p, &a)?;
        let delta = t.shift_delta.as_ref().map(|s| s.to_precision(Precision::Double));
        let (g, b) = fold_layer_norm(
            &gamma.to_precision(Precision::Double),
            &beta.to_precision(Precision::Double),
            &diag,
            delta.as_ref(),
        )?;
        *gamma = g.to_precision(f.ps);
        *beta = b.to_precision(f.ps);
    }

    if let Some(t) = ts.transform(Placement::PreOutProj) {
        if t.shift_delta.is_some() {
            return Err(Error::Config("pre_out_proj: a shift cannot be folded into the value projection".into()));
        }
        let pt = t.matrix_a.precision();
        let scheme = match pt {
            Precision::Double => PrecisionScheme::Double,
            Precision::Single => PrecisionScheme::Float,
        };
        let (inv, _) = linalg::invert(&t.effective()?, scheme)?;
        let wv = linalg::matmul(&out.weights[&Linear::V].to_precision(pt), &inv)?;
        let bv = linalg::matmul(&out.biases[&Linear::V].as_row().to_precision(pt), &inv)?;
        out.weights.insert(Linear::V, wv.to_precision(f.ps));
        out.biases.insert(Linear::V, Tensor::vector(bv.into_data()).to_precision(f.ps));
        qparams.remove(&Linear::V);
    }

    Ok(FusedBlock {
        params: out,
        act_quant: ts.config.act_quant,
        qparams,
    })
}

/// Largest relative Frobenius error between the transformed-quantized block
/// and the fused block over `calib`.
pub fn verify_fusion(params: &BlockParams, ts: &TransformSet, fused: &FusedBlock, calib: &[Tensor]) -> Result<f64> {
    let reference = build_graph(params, BuildSpec::from_mode(&BlockMode::TransformedQuantized(ts)), false);
    let errs: Vec<f64> = calib
        .par_iter()
        .map(|x| {
            let a = reference.eval(x)?.to_precision(Precision::Double);
            let b = fused.forward(x)?.to_precision(Precision::Double);
            linalg::relative_fro_error(&a, &b)
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// How the random transform is drawn in the merge-error experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeSampling {
    /// Standard normal `A`, `X` and `W`.
    Gaussian,
    /// Standard normal `A` with its diagonal raised to `1 + sum |off-diagonal|`,
    /// and `W` scaled by `1 / sqrt(dims)`.
    DiagonallyDominant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeErrorConfig {
    pub dims: usize,
    pub tokens: usize,
    pub trials: usize,
    pub scheme: PrecisionScheme,
    pub seed: u64,
    pub sampling: MergeSampling,
}

impl MergeErrorConfig {
    pub fn new(dims: usize, tokens: usize, trials: usize, scheme: PrecisionScheme, seed: u64) -> Self {
        MergeErrorConfig {
            dims,
            tokens,
            trials,
            scheme,
            seed,
            sampling: MergeSampling::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(Error::Config(format!("dims must be at least 2, got {}", self.dims)));
        }
        if self.tokens == 0 || self.trials == 0 {
            return Err(Error::Config("tokens and trials must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeErrorResult {
    pub scheme: PrecisionScheme,
    pub dims: usize,
    pub tokens: usize,
    pub trials: usize,
    pub mean_mse: f64,
}

impl MergeErrorResult {
    pub const CSV_HEADER: &'static str = "scheme,dims,tokens,trials,mean_mse";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:e}", self.scheme, self.dims, self.tokens, self.trials, self.mean_mse)
    }
}

pub fn merge_error_csv(rows: &[MergeErrorResult]) -> String {
    let mut s = String::from(MergeErrorResult::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Product as the scheme computes a transform product: promoted to double
/// and truncated for float-double, otherwise in the operands' precision.
fn scheme_matmul(a: &Tensor, b: &Tensor, scheme: PrecisionScheme) -> Result<Tensor> {
    match scheme {
        PrecisionScheme::FloatDouble => linalg::matmul_promoted(a, b, Precision::Single),
        _ => linalg::matmul(a, b),
    }
}

fn merge_trial(cfg: &MergeErrorConfig, trial: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let n = cfg.dims;
    let draw_a = |rng: &mut ChaCha8Rng| match cfg.sampling {
        MergeSampling::Gaussian => random_normal(n, n, rng),
        MergeSampling::DiagonallyDominant => random_sdd(n, rng),
    };
    let a = draw_a(&mut rng);
    let x = random_normal(cfg.tokens, n, &mut rng);
    let mut w = random_normal(n, n, &mut rng);
    if cfg.sampling == MergeSampling::DiagonallyDominant {
        w = w.scale(1.0 / (n as f64).sqrt());
    }

    let storage = cfg.scheme.storage();
    let (x, w) = (x.to_precision(storage), w.to_precision(storage));
    let mut a = a.to_precision(storage);
    let inv = match linalg::invert(&a, cfg.scheme) {
        Ok((inv, _)) => inv,
        Err(Error::Singular { .. }) => {
            a = draw_a(&mut rng).to_precision(storage);
            linalg::invert(&a, cfg.scheme)?.0
        }
        Err(e) => return Err(e),
    };
    let x_inv = scheme_matmul(&x, &inv, cfg.scheme)?;
    let aw = scheme_matmul(&a, &w, cfg.scheme)?;
    let merged = linalg::matmul(&x_inv, &aw)?;
    let direct = linalg::matmul(&x, &w)?;
    let sq: f64 = merged
        .data()
        .iter()
        .zip(direct.data())
        .map(|(m, d)| (m - d) * (m - d))
        .sum();
    Ok(sq / merged.len() as f64)
}

/// Mean over trials of the MSE between `X W` and `(X A^-1)(A W)` under the
/// scheme. Trials run in parallel on independent streams of the seed.
pub fn merge_error_experiment(cfg: &MergeErrorConfig) -> Result<MergeErrorResult> {
    cfg.validate()?;
    let mses: Vec<f64> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| merge_trial(cfg, t))
        .collect::<Result<_>>()?;
    Ok(MergeErrorResult {
        scheme: cfg.scheme,
        dims: cfg.dims,
        tokens: cfg.tokens,
        trials: cfg.trials,
        mean_mse: mses.iter().sum::<f64>() / mses.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{block_forward, PlacementKind, TransformPlacementConfig};
    use crate::optimizer::{optimize_block, synthetic_batches, OptimizerConfig};

    fn no_quant(kinds: [PlacementKind; 3]) -> TransformPlacementConfig {
        TransformPlacementConfig {
            pre_qkv: kinds[0],
            pre_out_proj: kinds[1],
            pre_fc1: kinds[2],
            shift: true,
            weight_quant: None,
            act_quant: None,
        }
    }

    fn random_set(params: &BlockParams, cfg: &TransformPlacementConfig, seed: u64) -> TransformSet {
        crate::suites::random_transform_set(params, cfg, seed).unwrap()
    }

    #[test]
    fn identity_fusion_is_bit_exact() {
        let p = BlockParams::random(16, 2, 42).unwrap();
        let ts = TransformSet::identity(&p, &no_quant([PlacementKind::DiagonalOnly, PlacementKind::PerHead, PlacementKind::DiagonalOnly])).unwrap();
        let fused = fuse_block(&p, &ts).unwrap();
        let x = synthetic_batches(1, 1, 8, 16).remove(0);
        assert_eq!(fused.forward(&x).unwrap(), block_forward(&p, &x, &BlockMode::FullPrecision).unwrap());
        assert_eq!(fused.parameter_count(), p.parameter_count());
    }

    #[test]
    fn row_scaling_example() {
        let a = Tensor::diag(&[2.0, 0.5]);
        let w = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(fold_weight(&a, &w).unwrap(), Tensor::from_rows(&[[2.0, 4.0], [1.5, 2.0]]));
    }

    #[test]
    fn layer_norm_fold_example() {
        let (g, b) = fold_layer_norm(
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::vector(vec![0.0, 0.0]),
            &[2.0, 1.0],
            Some(&Tensor::vector(vec![1.0, 0.0])),
        )
        .unwrap();
        assert_eq!(g.data(), [0.5, 1.0]);
        assert_eq!(b.data(), [-0.5, 0.0]);
    }

    #[test]
    fn unquantized_fusion_matches_transformed_block() {
        let p = BlockParams::random(16, 2, 3).unwrap();
        let xs = synthetic_batches(2, 2, 8, 16);
        use PlacementKind::*;
        for kinds in [
            [DiagonalOnly, PerHead, DiagonalOnly],
            [DiagonalOnly, DiagonalOnly, None],
            [None, PerHead, DiagonalOnly],
            [None, None, None],
        ] {
            let cfg = no_quant(kinds);
            for seed in 0..3 {
                let ts = random_set(&p, &cfg, seed);
                let fused = fuse_block(&p, &ts).unwrap();
                let err = verify_fusion(&p, &ts, &fused, &xs).unwrap();
                assert!(err < 1e-8, "{kinds:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn full_matrix_at_layer_norm_is_rejected() {
        let p = BlockParams::random(16, 2, 3).unwrap();
        let cfg = no_quant([PlacementKind::Full, PlacementKind::None, PlacementKind::None]);
        let ts = random_set(&p, &cfg, 0);
        let err = fuse_block(&p, &ts).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("pre_qkv")), "{err}");
    }

    #[test]
    fn optimized_pipeline_fuses_within_tolerance() {
        let p = BlockParams::random(16, 2, 42).unwrap();
        let xs = synthetic_batches(42, 2, 12, 16);
        let cfg = TransformPlacementConfig::default();
        let opt = OptimizerConfig {
            epochs: 3,
            ..OptimizerConfig::default()
        };
        let r = optimize_block(0, &p, &xs, &cfg, &opt).unwrap();
        let fused = fuse_block(&p, &r.transforms).unwrap();
        assert!(verify_fusion(&p, &r.transforms, &fused, &xs).unwrap() < 1e-6);
        assert_eq!(fused.dense_linears(), vec![Linear::V]);
        for (lin, q) in fused.quantized_weights().unwrap() {
            assert_eq!(&q.dequantize(), fused.params.weight(lin));
        }
    }

    #[test]
    fn merge_error_is_deterministic_and_validated() {
        let cfg = MergeErrorConfig::new(16, 8, 1, PrecisionScheme::Float, 7);
        assert_eq!(merge_error_experiment(&cfg).unwrap(), merge_error_experiment(&cfg).unwrap());
        let bad = MergeErrorConfig { dims: 1, ..cfg };
        assert!(matches!(merge_error_experiment(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn merge_error_orders_schemes_at_small_scale() {
        let mse: Vec<f64> = PrecisionScheme::ALL
            .iter()
            .map(|&s| merge_error_experiment(&MergeErrorConfig::new(64, 32, 4, s, 1)).unwrap().mean_mse)
            .collect();
        // ALL is [Double, FloatDouble, Float]
        assert!(mse[0] < mse[1] && mse[1] < mse[2], "{mse:?}");
    }
}
