//! Affine transform state: the gradual mask schedule, effective matrices,
//! masked updates, statistics-based initialization and the stability-factor
//! bound diagnostic.

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Floor applied to activation and weight statistics before initialization.
pub const STAT_FLOOR: f64 = 1e-8;

/// Default exponent for the diagonal initialization.
pub const DEFAULT_MIGRATION_EXPONENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Between the first LayerNorm and the q/k/v projections.
    PreQkv,
    /// Between the attention mixing and the output projection.
    PreOutProj,
    /// Between the second LayerNorm and the first MLP projection.
    PreFc1,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::PreQkv, Placement::PreOutProj, Placement::PreFc1];

    pub fn name(self) -> &'static str {
        match self {
            Placement::PreQkv => "pre_qkv",
            Placement::PreOutProj => "pre_out_proj",
            Placement::PreFc1 => "pre_fc1",
        }
    }

    /// Whether the transform directly follows a LayerNorm.
    pub fn follows_layer_norm(self) -> bool {
        !matches!(self, Placement::PreOutProj)
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Full,
    DiagonalOnly,
    PerHead { head_dim: usize },
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Full => "full",
            TransformKind::DiagonalOnly => "diagonal-only",
            TransformKind::PerHead { .. } => "per-head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub target_epochs: usize,
    pub stability_factor: f64,
    /// Dimension the band width is measured against.
    pub hidden_size: usize,
}

impl MaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.target_epochs == 0 {
            return Err(Error::Config("target epochs must be at least 1".into()));
        }
        if !(self.stability_factor >= 0.0) {
            return Err(Error::Config(format!(
                "stability factor must be non-negative, got {}",
                self.stability_factor
            )));
        }
        Ok(())
    }
}

/// Whether `(i, j)` lies in the unfrozen band at `epoch`:
/// `0 < |i - j| <= epoch / epochs * hidden`, compared exactly.
#[inline]
pub fn in_band(i: usize, j: usize, epoch: usize, epochs: usize, hidden: usize) -> bool {
    let off = i.abs_diff(j);
    off > 0 && off * epochs <= epoch * hidden
}

/// The gradual mask over a `hidden x hidden` matrix: 1 on the diagonal,
/// the stability factor inside the band, 0 elsewhere.
pub fn gradual_mask(epoch: usize, schedule: &MaskSchedule) -> Result<Tensor> {
    schedule.validate()?;
    check_epoch(epoch, schedule.target_epochs)?;
    let h = schedule.hidden_size;
    let mut m = Tensor::zeros(&[h, h]);
    fill_band(&mut m, 0, h, epoch, schedule);
    Ok(m)
}

/// Mask for a `dim x dim` transform of the given kind. Per-head masks apply
/// the band rule inside each `head_dim` block with `hidden_size = head_dim`
/// and are zero across blocks; diagonal-only masks are the identity.
pub fn mask_for_kind(kind: TransformKind, dim: usize, epoch: usize, schedule: &MaskSchedule) -> Result<Tensor> {
    schedule.validate()?;
    check_epoch(epoch, schedule.target_epochs)?;
    match kind {
        TransformKind::DiagonalOnly => Ok(Tensor::identity(dim)),
        TransformKind::Full => {
            let s = MaskSchedule {
                hidden_size: dim,
                ..*schedule
            };
            gradual_mask(epoch, &s)
        }
        TransformKind::PerHead { head_dim } => {
            if head_dim == 0 || !dim.is_multiple_of(head_dim) {
                return Err(Error::Config(format!(
                    "head dimension {head_dim} does not divide {dim}"
                )));
            }
            let s = MaskSchedule {
                hidden_size: head_dim,
                ..*schedule
            };
            let mut m = Tensor::zeros(&[dim, dim]);
            for start in (0..dim).step_by(head_dim) {
                fill_band(&mut m, start, head_dim, epoch, &s);
            }
            Ok(m)
        }
    }
}

fn fill_band(m: &mut Tensor, start: usize, size: usize, epoch: usize, s: &MaskSchedule) {
    for i in 0..size {
        for j in 0..size {
            let v = if i == j {
                1.0
            } else if in_band(i, j, epoch, s.target_epochs, s.hidden_size) {
                s.stability_factor
            } else {
                0.0
            };
            m.set(start + i, start + j, v);
        }
    }
}

fn check_epoch(epoch: usize, epochs: usize) -> Result<()> {
    if epoch == 0 || epoch > epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs });
    }
    Ok(())
}

/// `A ∘ GM`.
pub fn effective_matrix(a: &Tensor, gm: &Tensor) -> Result<Tensor> {
    a.hadamard(gm)
}

/// One Adam step on `A` driven by the masked gradient `gm ∘ grad_a_star`.
///
/// Entries where the mask is zero receive no gradient and so never move.
pub fn masked_update(
    a: &Tensor,
    gm: &Tensor,
    grad_a_star: &Tensor,
    lr: f64,
    state: &mut AdamState,
    adam: &AdamConfig,
) -> Result<Tensor> {
    a.check_same_shape(gm, "masked update")?;
    let masked = gm.hadamard(grad_a_star)?;
    state.step(a, &masked, lr, adam)
}

/// Diagonal matrix with `a_jj = act_j^exponent / w_j^(1 - exponent)`.
pub fn init_diagonal(act_absmax: &[f64], w_absmax: &[f64], exponent: f64) -> Result<Tensor> {
    if act_absmax.len() != w_absmax.len() {
        return Err(Error::shape(format!(
            "activation statistics have {} channels, weights {}",
            act_absmax.len(),
            w_absmax.len()
        )));
    }
    if !(0.0..=1.0).contains(&exponent) {
        return Err(Error::Config(format!("migration exponent {exponent} outside [0, 1]")));
    }
    let diag: Vec<f64> = act_absmax
        .iter()
        .zip(w_absmax)
        .map(|(&a, &w)| a.max(STAT_FLOOR).powf(exponent) / w.max(STAT_FLOOR).powf(1.0 - exponent))
        .collect();
    Ok(Tensor::diag(&diag))
}

/// Channel-wise midpoint of the observed activation range.
pub fn init_shift(act_max: &[f64], act_min: &[f64]) -> Result<Tensor> {
    if act_max.len() != act_min.len() {
        return Err(Error::shape("shift statistics differ in length"));
    }
    Ok(Tensor::vector(
        act_max.iter().zip(act_min).map(|(hi, lo)| (hi + lo) / 2.0).collect(),
    ))
}

/// Accumulated per-step gradients of one transform.
///
/// Each recorded step `g` is the direction the update rule actually applied,
/// scaled so that `A_{s+1} = A_s + lr * g`; under plain gradient steps this is
/// the masked gradient itself.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHistory {
    pub lr: f64,
    pub steps: usize,
    sum: Tensor,
}

impl GradHistory {
    pub fn new(dim: usize, lr: f64) -> Self {
        GradHistory {
            lr,
            steps: 0,
            sum: Tensor::zeros(&[dim, dim]),
        }
    }

    pub fn record(&mut self, step: &Tensor) -> Result<()> {
        self.sum = self.sum.add(&step.to_precision(self.sum.precision()))?;
        self.steps += 1;
        Ok(())
    }

    /// Records the change between two consecutive parameter values.
    pub fn record_update(&mut self, before: &Tensor, after: &Tensor) -> Result<()> {
        let step = if self.lr == 0.0 {
            Tensor::zeros(before.shape())
        } else {
            after.to_precision(crate::Precision::Double)
                .sub(&before.to_precision(crate::Precision::Double))?
                .scale(1.0 / self.lr)
        };
        self.record(&step)
    }

    pub fn accumulated(&self) -> &Tensor {
        &self.sum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBoundReport {
    pub accumulated_diag_grad: Vec<f64>,
    pub accumulated_offdiag_grad: Vec<f64>,
    /// Per row; `None` stands for an unbounded row.
    pub bound: Vec<Option<f64>>,
    pub global_bound: Option<f64>,
}

impl AlphaBoundReport {
    pub fn global(&self) -> f64 {
        self.global_bound.unwrap_or(f64::INFINITY)
    }
}

/// Largest stability factor for which the off-diagonal mass accumulated so
/// far stays below the diagonal, row by row:
/// `|n_ii^0 + lr * S_ii| / (lr * sum_{j != i} |S_ij|)` with `S` the summed
/// gradients; rows with a zero denominator are unbounded.
pub fn alpha_bound(init_diag: &[f64], history: &GradHistory) -> Result<AlphaBoundReport> {
    let s = history.accumulated();
    let n = s.rows();
    if init_diag.len() != n {
        return Err(Error::shape(format!(
            "initial diagonal has {} entries, history is {n}x{n}",
            init_diag.len()
        )));
    }
    let lr = history.lr;
    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n);
    let mut bound = Vec::with_capacity(n);
    for i in 0..n {
        let d = s.get(i, i);
        let o: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(i, j).abs()).sum();
        let denom = lr * o;
        diag.push(d);
        off.push(o);
        bound.push((denom > 0.0).then(|| (init_diag[i] + lr * d).abs() / denom));
    }
    let global_bound = bound.iter().flatten().cloned().reduce(f64::min);
    Ok(AlphaBoundReport {
        accumulated_diag_grad: diag,
        accumulated_offdiag_grad: off,
        bound,
        global_bound,
    })
}

/// A learned transform at one placement.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub placement: Placement,
    pub kind: TransformKind,
    pub matrix_a: Tensor,
    /// Shift subtracted from the activation; `None` where shifts are disabled.
    pub shift_delta: Option<Tensor>,
    pub schedule: MaskSchedule,
    /// Mask in force for the last evaluated epoch.
    pub mask: Tensor,
}

impl AffineTransform {
    /// Transform initialized to a diagonal matrix (mask at epoch 1).
    pub fn new(
        placement: Placement,
        kind: TransformKind,
        matrix_a: Tensor,
        shift_delta: Option<Tensor>,
        schedule: MaskSchedule,
    ) -> Result<Self> {
        let mask = mask_for_kind(kind, matrix_a.rows(), 1, &schedule)?;
        Ok(AffineTransform {
            placement,
            kind,
            matrix_a,
            shift_delta,
            schedule,
            mask,
        })
    }

    pub fn identity(placement: Placement, kind: TransformKind, dim: usize) -> Self {
        AffineTransform {
            placement,
            kind,
            matrix_a: Tensor::identity(dim),
            shift_delta: None,
            schedule: MaskSchedule {
                target_epochs: 1,
                stability_factor: 0.0,
                hidden_size: dim,
            },
            mask: Tensor::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix_a.rows()
    }

    pub fn mask_at(&self, epoch: usize) -> Result<Tensor> {
        mask_for_kind(self.kind, self.dim(), epoch, &self.schedule)
    }

    /// `A ∘ GM` under the current mask.
    pub fn effective(&self) -> Result<Tensor> {
        effective_matrix(&self.matrix_a, &self.mask)
    }

    pub fn is_sdd(&self) -> Result<bool> {
        Ok(linalg::is_strictly_diagonally_dominant(&self.effective()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(t: usize, alpha: f64, h: usize) -> MaskSchedule {
        MaskSchedule {
            target_epochs: t,
            stability_factor: alpha,
            hidden_size: h,
        }
    }

    #[test]
    fn full_band_at_last_epoch() {
        let m = gradual_mask(4, &schedule(4, 0.25, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.25 });
            }
        }
    }

    #[test]
    fn tridiagonal_at_first_epoch() {
        let m = gradual_mask(1, &schedule(4, 0.5, 4)).unwrap();
        for i in 0..4usize {
            for j in 0..4 {
                let expect = match i.abs_diff(j) {
                    0 => 1.0,
                    1 => 0.5,
                    _ => 0.0,
                };
                assert_eq!(m.get(i, j), expect);
            }
        }
    }

    #[test]
    fn empty_band_when_width_below_one() {
        let m = gradual_mask(1, &schedule(6, 0.5, 4)).unwrap();
        assert_eq!(m, Tensor::identity(4));
    }

    #[test]
    fn epoch_out_of_range() {
        assert!(matches!(
            gradual_mask(0, &schedule(4, 0.5, 4)),
            Err(Error::EpochOutOfRange { .. })
        ));
        assert!(gradual_mask(5, &schedule(4, 0.5, 4)).is_err());
    }

    #[test]
    fn per_head_mask_is_block_diagonal() {
        let m = mask_for_kind(TransformKind::PerHead { head_dim: 2 }, 6, 3, &schedule(3, 0.5, 6)).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let v = m.get(i, j);
                if i / 2 != j / 2 {
                    assert_eq!(v, 0.0);
                } else if i == j {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.5);
                }
            }
        }
        assert!(mask_for_kind(TransformKind::PerHead { head_dim: 4 }, 6, 1, &schedule(3, 0.5, 6)).is_err());
    }

    #[test]
    fn effective_matrix_examples() {
        let a = Tensor::diag(&[2.0, 3.0]);
        let gm = Tensor::from_rows(&[[1.0, 0.3], [0.3, 1.0]]);
        assert_eq!(effective_matrix(&a, &gm).unwrap(), a);
        let a = Tensor::from_rows(&[[2.0, 4.0], [4.0, 2.0]]);
        let gm = Tensor::from_rows(&[[1.0, 0.5], [0.5, 1.0]]);
        assert_eq!(
            effective_matrix(&a, &gm).unwrap(),
            Tensor::from_rows(&[[2.0, 2.0], [2.0, 2.0]])
        );
        assert_eq!(
            effective_matrix(&a, &Tensor::identity(2)).unwrap(),
            Tensor::diag(&[2.0, 2.0])
        );
        assert!(effective_matrix(&a, &Tensor::identity(3)).is_err());
    }

    #[test]
    fn masked_update_freezes_zero_mask_entries() {
        let a = Tensor::from_rows(&[[1.0, 0.2], [0.3, 1.0]]);
        let grad = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.1]]);
        let mut st = AdamState::new(4);
        let out = masked_update(&a, &Tensor::identity(2), &grad, 0.01, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out.get(0, 1), 0.2);
        assert_eq!(out.get(1, 0), 0.3);
        assert_ne!(out.get(0, 0), 1.0);

        let mut st = AdamState::new(4);
        let full = Tensor::full(&[2, 2], 1.0);
        let out = masked_update(&a, &full, &grad, 0.0, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn zero_alpha_keeps_diagonal_forever() {
        let s = schedule(5, 0.0, 3);
        let mut a = Tensor::diag(&[1.0, 2.0, 3.0]);
        let mut st = AdamState::new(9);
        for e in 1..=5 {
            let gm = gradual_mask(e, &s).unwrap();
            let grad = Tensor::full(&[3, 3], 0.7);
            a = masked_update(&a, &gm, &grad, 0.1, &mut st, &AdamConfig::default()).unwrap();
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn diagonal_init_examples() {
        assert_eq!(init_diagonal(&[1.0; 3], &[1.0; 3], 0.3).unwrap(), Tensor::identity(3));
        assert_eq!(
            init_diagonal(&[5.0, 7.0], &[2.0, 4.0], 0.0).unwrap(),
            Tensor::diag(&[0.5, 0.25])
        );
        assert_eq!(init_diagonal(&[4.0], &[1.0], 0.5).unwrap(), Tensor::diag(&[2.0]));
        let floored = init_diagonal(&[0.0], &[1.0], 0.5).unwrap();
        assert!(floored.get(0, 0) > 0.0);
    }

    #[test]
    fn shift_init_examples() {
        assert_eq!(init_shift(&[2.0], &[-2.0]).unwrap().data(), &[0.0]);
        assert_eq!(init_shift(&[3.0], &[1.0]).unwrap().data(), &[2.0]);
        assert_eq!(init_shift(&[0.0], &[0.0]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn alpha_bound_examples() {
        let mut h = GradHistory::new(2, 0.01);
        h.record(&Tensor::diag(&[0.5, -0.2])).unwrap();
        let r = alpha_bound(&[1.0, 1.0], &h).unwrap();
        assert_eq!(r.global_bound, None);
        assert!(r.global().is_infinite());

        // off-diagonal accumulated gradients total 30 in row 0
        let mut h = GradHistory::new(2, 0.01);
        h.record(&Tensor::from_rows(&[[0.0, 10.0], [0.0, 0.0]])).unwrap();
        h.record(&Tensor::from_rows(&[[0.0, 20.0], [0.0, 0.0]])).unwrap();
        let r = alpha_bound(&[1.0, 1.0], &h).unwrap();
        assert!((r.bound[0].unwrap() - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.bound[1], None);
        assert!((r.global() - 10.0 / 3.0).abs() < 1e-12);

        let mut h = GradHistory::new(2, 0.0);
        h.record(&Tensor::full(&[2, 2], 4.0)).unwrap();
        assert!(alpha_bound(&[1.0, 1.0], &h).unwrap().global().is_infinite());
    }

    #[test]
    fn recorded_updates_reproduce_margin() {
        // With updates recorded as (after - before) / lr, the bound equals
        // |a_ii| / sum_j |a_ij| of the current matrix.
        let a0 = Tensor::diag(&[2.0, 1.0]);
        let a1 = Tensor::from_rows(&[[1.9, 0.4], [-0.1, 1.2]]);
        let mut h = GradHistory::new(2, 0.05);
        h.record_update(&a0, &a1).unwrap();
        let r = alpha_bound(&[2.0, 1.0], &h).unwrap();
        assert!((r.bound[0].unwrap() - 1.9 / 0.4).abs() < 1e-12);
        assert!((r.bound[1].unwrap() - 1.2 / 0.1).abs() < 1e-9);
    }
}
