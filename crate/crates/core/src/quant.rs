//! Uniform fake quantization with per-tensor, per-channel and per-group
//! step sizes, and integer export of quantized tensors.
//!
//! Weight tensors are laid out `[in, out]` (activations multiply from the
//! left), so an output channel is a column and groups run down a column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Smallest admissible step size.
pub const DELTA_FLOOR: f64 = 1e-8;

/// Initial clip scalar before the sigmoid; `sigmoid(CLIP_RAW_INIT) = 1 - 1e-4`.
pub const CLIP_RAW_INIT: f64 = 9.210_240_366_975_85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    pub granularity: Granularity,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default)]
    pub learnable_clip: bool,
}

impl QuantConfig {
    pub fn weight(bits: u32) -> Self {
        QuantConfig {
            bits,
            granularity: Granularity::PerChannel,
            symmetric: false,
            learnable_clip: true,
        }
    }

    pub fn activation(bits: u32) -> Self {
        QuantConfig {
            bits,
            granularity: Granularity::PerTensor,
            symmetric: false,
            learnable_clip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 2..=16, got {}", self.bits)));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    pub fn qmax(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Number of groups for a `[rows, cols]` tensor.
    pub fn group_count(&self, rows: usize, cols: usize) -> Result<usize> {
        Ok(match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => cols,
            Granularity::PerGroup(g) => {
                if g == 0 || !rows.is_multiple_of(g) {
                    return Err(Error::InvalidQuantParams(format!(
                        "group size {g} does not divide {rows}"
                    )));
                }
                (rows / g) * cols
            }
        })
    }

    #[inline]
    pub fn group_of(&self, rows: usize, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => c,
            Granularity::PerGroup(g) => c * (rows / g) + r / g,
        }
    }

    /// Group index of every element in row-major order.
    pub fn group_map(&self, rows: usize, cols: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.group_of(rows, r, c));
            }
        }
        out
    }
}

/// Per-group extrema of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Flat index of the first element attaining each group's min / max.
    pub arg_min: Vec<usize>,
    pub arg_max: Vec<usize>,
}

impl GroupStats {
    pub fn of(x: &Tensor, cfg: &QuantConfig) -> Result<Self> {
        let (rows, cols) = (x.rows(), x.cols());
        let groups = cfg.group_count(rows, cols)?;
        let mut min = vec![f64::INFINITY; groups];
        let mut max = vec![f64::NEG_INFINITY; groups];
        let mut arg_min = vec![0; groups];
        let mut arg_max = vec![0; groups];
        for r in 0..rows {
            for (c, &v) in x.row(r).iter().enumerate() {
                let g = cfg.group_of(rows, r, c);
                if v < min[g] {
                    min[g] = v;
                    arg_min[g] = r * cols + c;
                }
                if v > max[g] {
                    max[g] = v;
                    arg_max[g] = r * cols + c;
                }
            }
        }
        Ok(GroupStats { min, max, arg_min, arg_max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub config: QuantConfig,
    pub rows: usize,
    pub cols: usize,
    pub delta: Vec<f64>,
    pub zero_point: Vec<u32>,
    pub clip_lo: Vec<f64>,
    pub clip_hi: Vec<f64>,
}

impl QuantParams {
    pub fn bits(&self) -> u32 {
        self.config.bits
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.config.group_count(self.rows, self.cols)?;
        if self.delta.len() != groups || self.zero_point.len() != groups {
            return Err(Error::InvalidQuantParams(format!(
                "expected {groups} groups, got {} step sizes and {} zero points",
                self.delta.len(),
                self.zero_point.len()
            )));
        }
        let qmax = self.config.qmax();
        if let Some(d) = self.delta.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidQuantParams(format!("step size {d} must be positive")));
        }
        if let Some(z) = self.zero_point.iter().find(|&&z| z as f64 > qmax) {
            return Err(Error::InvalidQuantParams(format!("zero point {z} exceeds {qmax}")));
        }
        let bad_clip = |c: &f64| !(*c > 0.0 && *c <= 1.0);
        if self.clip_lo.iter().chain(&self.clip_hi).any(bad_clip) {
            return Err(Error::InvalidQuantParams("clip scalars must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Direct construction for a single group; mostly useful in tests.
    pub fn per_tensor(delta: f64, zero_point: u32, bits: u32, rows: usize, cols: usize) -> Self {
        QuantParams {
            config: QuantConfig {
                bits,
                granularity: Granularity::PerTensor,
                symmetric: false,
                learnable_clip: false,
            },
            rows,
            cols,
            delta: vec![delta],
            zero_point: vec![zero_point],
            clip_lo: vec![1.0],
            clip_hi: vec![1.0],
        }
    }
}

/// Step size and zero point of one group, with the unrounded zero point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GroupScale {
    pub delta: f64,
    /// True when `delta` sits at [`DELTA_FLOOR`] and is therefore constant.
    pub floored: bool,
    pub zp_raw: f64,
    pub zero_point: f64,
    /// True when rounding `zp_raw` landed outside `[0, qmax]` and was clamped.
    pub zp_clamped: bool,
}

pub(crate) fn group_scale(cfg: &QuantConfig, min: f64, max: f64, clip_lo: f64, clip_hi: f64) -> GroupScale {
    let qmax = cfg.qmax();
    if cfg.symmetric {
        let half = (1u64 << (cfg.bits - 1)) as f64;
        let absmax = min.abs().max(max.abs());
        let raw = clip_hi * absmax / (half - 1.0);
        let floored = !(raw >= DELTA_FLOOR);
        GroupScale {
            delta: if floored { DELTA_FLOOR } else { raw },
            floored,
            zp_raw: half,
            zero_point: half,
            zp_clamped: true,
        }
    } else {
        let raw = (clip_hi * max - clip_lo * min) / qmax;
        let floored = !(raw >= DELTA_FLOOR);
        let delta = if floored { DELTA_FLOOR } else { raw };
        let zp_raw = -clip_lo * min / delta;
        let rounded = zp_raw.round();
        let zero_point = rounded.clamp(0.0, qmax);
        GroupScale {
            delta,
            floored,
            zp_raw,
            zero_point,
            zp_clamped: rounded != zero_point,
        }
    }
}

/// Min/max quantization parameters with clipping scalars in `(0, 1]`.
pub fn compute_qparams_clipped(
    x: &Tensor,
    cfg: &QuantConfig,
    clip_lo: &[f64],
    clip_hi: &[f64],
) -> Result<QuantParams> {
    if x.is_empty() {
        return Err(Error::InvalidQuantParams("cannot quantize an empty tensor".into()));
    }
    cfg.validate()?;
    let stats = GroupStats::of(x, cfg)?;
    let groups = stats.min.len();
    if clip_lo.len() != groups || clip_hi.len() != groups {
        return Err(Error::InvalidQuantParams(format!(
            "expected {groups} clip scalars per side"
        )));
    }
    let mut delta = Vec::with_capacity(groups);
    let mut zero_point = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = group_scale(cfg, stats.min[g], stats.max[g], clip_lo[g], clip_hi[g]);
        delta.push(s.delta);
        zero_point.push(s.zero_point as u32);
    }
    Ok(QuantParams {
        config: *cfg,
        rows: x.rows(),
        cols: x.cols(),
        delta,
        zero_point,
        clip_lo: clip_lo.to_vec(),
        clip_hi: clip_hi.to_vec(),
    })
}

/// Min/max quantization parameters without clipping.
pub fn compute_qparams(x: &Tensor, cfg: &QuantConfig) -> Result<QuantParams> {
    let groups = cfg.group_count(x.rows(), x.cols())?;
    let ones = vec![1.0; groups];
    compute_qparams_clipped(x, cfg, &ones, &ones)
}

/// Rounded, zero-point-shifted grid index before clamping.
#[inline]
pub(crate) fn pre_clamp_index(x: f64, delta: f64, zero_point: f64) -> f64 {
    (x / delta).round() + zero_point
}

#[inline]
pub(crate) fn dequant(q: f64, delta: f64, zero_point: f64) -> f64 {
    delta * (q - zero_point)
}

fn check_layout(x: &Tensor, qp: &QuantParams) -> Result<()> {
    if x.rows() != qp.rows || x.cols() != qp.cols {
        return Err(Error::shape(format!(
            "quantization parameters are for {}x{}, tensor is {:?}",
            qp.rows,
            qp.cols,
            x.shape()
        )));
    }
    Ok(())
}

/// `delta * (clamp(round(x / delta) + zp, 0, 2^n - 1) - zp)`, rounding half away
/// from zero, with each group's parameters applied to its slice.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    qp.validate()?;
    check_layout(x, qp)?;
    let qmax = qp.config.qmax();
    let rows = qp.rows;
    let p = x.precision();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = qp.config.group_of(rows, r, c);
            let (d, z) = (qp.delta[g], qp.zero_point[g] as f64);
            let q = pre_clamp_index(v, d, z).clamp(0.0, qmax);
            out.push(p.round(dequant(q, d, z)));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out, p))
}

/// Integer grid codes plus the parameters needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<u16>,
    pub qparams: QuantParams,
    pub shape: Vec<usize>,
    pub precision: Precision,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        let qp = &self.qparams;
        let (rows, cols) = (qp.rows, qp.cols);
        let mut out = Vec::with_capacity(self.codes.len());
        for r in 0..rows {
            for c in 0..cols {
                let g = qp.config.group_of(rows, r, c);
                let q = self.codes[r * cols + c] as f64;
                out.push(self.precision.round(dequant(q, qp.delta[g], qp.zero_point[g] as f64)));
            }
        }
        Tensor::from_parts(self.shape.clone(), out, self.precision)
    }
}

/// Quantizes to integer codes; `dequantize` reproduces [`fake_quant`] exactly.
pub fn quantize_export(x: &Tensor, qp: &QuantParams) -> Result<QuantizedTensor> {
    qp.validate()?;
    check_layout(x, qp)?;
    let qmax = qp.config.qmax();
    let rows = qp.rows;
    let mut codes = Vec::with_capacity(x.len());
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = qp.config.group_of(rows, r, c);
            let q = pre_clamp_index(v, qp.delta[g], qp.zero_point[g] as f64).clamp(0.0, qmax);
            codes.push(q as u16);
        }
    }
    Ok(QuantizedTensor {
        codes,
        qparams: qp.clone(),
        shape: x.shape().to_vec(),
        precision: x.precision(),
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v])
    }

    #[test]
    fn clip_init_is_nearly_full_range() {
        assert!((sigmoid(CLIP_RAW_INIT) - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn qparams_min_max_example() {
        let x = row(&[0.0, 1.0, 2.0, 3.0]);
        let qp = compute_qparams(&x, &QuantConfig::activation(2)).unwrap();
        assert_eq!(qp.delta, vec![1.0]);
        assert_eq!(qp.zero_point, vec![0]);
    }

    #[test]
    fn qparams_degenerate_floor() {
        let x = Tensor::zeros(&[3, 3]);
        let qp = compute_qparams(&x, &QuantConfig::activation(4)).unwrap();
        assert_eq!(qp.delta, vec![DELTA_FLOOR]);
        assert_eq!(qp.zero_point, vec![0]);
    }

    #[test]
    fn qparams_rounds_zero_point_half_away() {
        let x = row(&[-1.0, 0.25, 1.0]);
        let qp = compute_qparams(&x, &QuantConfig::activation(3)).unwrap();
        assert!((qp.delta[0] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(qp.zero_point, vec![4]);
    }

    #[test]
    fn symmetric_qparams() {
        let x = row(&[-2.0, 0.5, 1.0]);
        let cfg = QuantConfig {
            symmetric: true,
            ..QuantConfig::activation(4)
        };
        let qp = compute_qparams(&x, &cfg).unwrap();
        assert!((qp.delta[0] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(qp.zero_point, vec![8]);
    }

    #[test]
    fn fake_quant_examples() {
        let qp = QuantParams::per_tensor(0.5, 2, 3, 1, 1);
        assert_eq!(fake_quant(&row(&[-0.6]), &qp).unwrap().data(), &[-0.5]);
        let qp = QuantParams::per_tensor(1.0, 0, 4, 1, 1);
        assert_eq!(fake_quant(&row(&[100.0]), &qp).unwrap().data(), &[15.0]);
        let qp = QuantParams::per_tensor(1.0, 0, 2, 1, 3);
        assert_eq!(
            fake_quant(&row(&[1.4, 5.0, 0.0]), &qp).unwrap().data(),
            &[1.0, 3.0, 0.0]
        );
        let grid = row(&[-1.0, -0.5, 0.0]);
        assert_eq!(fake_quant(&grid, &QuantParams::per_tensor(0.5, 2, 3, 1, 3)).unwrap(), grid);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut qp = QuantParams::per_tensor(0.0, 0, 4, 1, 1);
        assert!(fake_quant(&row(&[1.0]), &qp).is_err());
        qp.delta = vec![1.0];
        qp.zero_point = vec![16];
        assert!(fake_quant(&row(&[1.0]), &qp).is_err());
        qp.zero_point = vec![0];
        assert!(fake_quant(&row(&[1.0, 2.0]), &qp).is_err());
    }

    #[test]
    fn group_layout_runs_down_columns() {
        let cfg = QuantConfig {
            granularity: Granularity::PerGroup(2),
            ..QuantConfig::weight(4)
        };
        assert_eq!(cfg.group_count(4, 3).unwrap(), 6);
        assert_eq!(cfg.group_of(4, 0, 0), 0);
        assert_eq!(cfg.group_of(4, 3, 0), 1);
        assert_eq!(cfg.group_of(4, 2, 2), 5);
        assert!(cfg.group_count(5, 3).is_err());
    }

    #[test]
    fn per_channel_uses_column_ranges() {
        let w = Tensor::from_rows(&[[0.0, -4.0], [3.0, 4.0]]);
        let qp = compute_qparams(&w, &QuantConfig {
            learnable_clip: false,
            ..QuantConfig::weight(2)
        })
        .unwrap();
        assert_eq!(qp.delta, vec![1.0, 8.0 / 3.0]);
        // column 1: delta = 8/3, zp = round(1.5) = 2; -4 -> index 0, 4 -> index 4 clamped to 3
        let expect = Tensor::from_rows(&[[0.0, -16.0 / 3.0], [3.0, 8.0 / 3.0]]);
        assert_eq!(fake_quant(&w, &qp).unwrap(), expect);
    }

    #[test]
    fn export_round_trip() {
        let x = Tensor::from_rows(&[[0.3, -1.7, 2.2], [0.0, 0.9, -0.4]]);
        let qp = compute_qparams(&x, &QuantConfig::weight(4)).unwrap();
        let q = quantize_export(&x, &qp).unwrap();
        assert_eq!(q.dequantize(), fake_quant(&x, &qp).unwrap());
        let zeros = Tensor::zeros(&[2, 2]);
        let qp = compute_qparams(&zeros, &QuantConfig::activation(4)).unwrap();
        assert!(quantize_export(&zeros, &qp).unwrap().codes.iter().all(|&c| c == 0));
    }
}
