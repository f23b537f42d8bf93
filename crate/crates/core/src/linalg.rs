//! Dense matrix kernels: products, LU inversion under the three precision
//! schemes, norms and diagonal-dominance predicates.

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// How a computation is split between single and double precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionScheme {
    /// Everything in double precision.
    Double,
    /// Everything in single precision.
    Float,
    /// Operands stored in single precision; each transform product or
    /// inversion is promoted to double and the result truncated back.
    FloatDouble,
}

impl PrecisionScheme {
    pub const ALL: [PrecisionScheme; 3] = [
        PrecisionScheme::Double,
        PrecisionScheme::FloatDouble,
        PrecisionScheme::Float,
    ];

    /// Precision the model tensors are stored in.
    pub fn storage(self) -> Precision {
        match self {
            PrecisionScheme::Double => Precision::Double,
            PrecisionScheme::Float | PrecisionScheme::FloatDouble => Precision::Single,
        }
    }

    /// Precision transform matrices are held and applied in.
    pub fn transform(self) -> Precision {
        match self {
            PrecisionScheme::Double | PrecisionScheme::FloatDouble => Precision::Double,
            PrecisionScheme::Float => Precision::Single,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionScheme::Double => "double",
            PrecisionScheme::Float => "float",
            PrecisionScheme::FloatDouble => "float-double",
        }
    }
}

impl std::str::FromStr for PrecisionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "double" => Ok(PrecisionScheme::Double),
            "float" => Ok(PrecisionScheme::Float),
            "float-double" | "floatdouble" | "float_double" => Ok(PrecisionScheme::FloatDouble),
            other => Err(Error::Config(format!("unknown precision scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for PrecisionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionDiagnostics {
    pub pivot_min_abs: f64,
    /// `||M||_1 * ||M^-1||_1`.
    pub condition_estimate: f64,
    /// `||M * M^-1 - I||_F`, evaluated in double precision.
    pub reconstruction_error: f64,
}

/// Minimum work (multiply-adds) before a product is split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

fn matmul_kernel<T: Float + Send + Sync>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((m, k, n))
}

/// Row-major matrix product in the operands' precision.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    if a.precision() != b.precision() {
        return Err(Error::shape(format!(
            "matmul operands differ in precision ({:?} vs {:?})",
            a.precision(),
            b.precision()
        )));
    }
    Ok(match a.precision() {
        Precision::Double => {
            Tensor::from_parts(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n), Precision::Double)
        }
        Precision::Single => {
            let af: Vec<f32> = a.data().iter().map(|&v| v as f32).collect();
            let bf: Vec<f32> = b.data().iter().map(|&v| v as f32).collect();
            let out = matmul_kernel(&af, &bf, m, k, n);
            Tensor::from_parts(
                vec![m, n],
                out.into_iter().map(|v| v as f64).collect(),
                Precision::Single,
            )
        }
    })
}

/// Product evaluated in double precision and rounded to `out` precision.
///
/// This is the promote/compute/truncate step of [`PrecisionScheme::FloatDouble`].
pub fn matmul_promoted(a: &Tensor, b: &Tensor, out: Precision) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let data = matmul_kernel(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], data, out)
}

/// LU factorization with partial pivoting followed by inversion, in `T`.
///
/// Returns the inverse and the smallest absolute pivot.
fn lu_inverse_kernel<T: Float>(m: &[f64], n: usize, threshold: f64) -> Result<(Vec<T>, f64)> {
    let mut lu: Vec<T> = m.iter().map(|&v| T::from(v).unwrap()).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pivot_min = f64::INFINITY;

    for col in 0..n {
        let mut best = col;
        let mut best_abs = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best_abs {
                best = r;
                best_abs = v;
            }
        }
        let pivot_abs = best_abs.to_f64().unwrap();
        pivot_min = pivot_min.min(pivot_abs);
        if pivot_abs == 0.0 || pivot_abs < threshold {
            return Err(Error::Singular { pivot: pivot_abs });
        }
        if best != col {
            for j in 0..n {
                lu.swap(col * n + j, best * n + j);
            }
            perm.swap(col, best);
        }
        let pivot = lu[col * n + col];
        for r in col + 1..n {
            let factor = lu[r * n + col] / pivot;
            lu[r * n + col] = factor;
            if factor == T::zero() {
                continue;
            }
            let (upper, lower) = lu.split_at_mut(r * n);
            let pivot_row = &upper[col * n + col + 1..col * n + n];
            let target = &mut lower[col + 1..n];
            for (t, &p) in target.iter_mut().zip(pivot_row) {
                *t = *t - factor * p;
            }
        }
    }

    // Solve L U X = P, one row of X at a time so the inner loops are contiguous.
    let mut x = vec![T::zero(); n * n];
    for (i, &p) in perm.iter().enumerate() {
        x[i * n + p] = T::one();
    }
    for i in 0..n {
        for k in 0..i {
            let l = lu[i * n + k];
            if l == T::zero() {
                continue;
            }
            let (upper, lower) = x.split_at_mut(i * n);
            let src = &upper[k * n..k * n + n];
            for (t, &s) in lower[..n].iter_mut().zip(src) {
                *t = *t - l * s;
            }
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let u = lu[i * n + k];
            if u == T::zero() {
                continue;
            }
            let (upper, lower) = x.split_at_mut(k * n);
            let src = &lower[..n];
            let dst = &mut upper[i * n..i * n + n];
            for (t, &s) in dst.iter_mut().zip(src) {
                *t = *t - u * s;
            }
        }
        let d = lu[i * n + i];
        for t in &mut x[i * n..i * n + n] {
            *t = *t / d;
        }
    }
    Ok((x, pivot_min))
}

fn singularity_threshold(m: &Tensor, eps: f64) -> f64 {
    1e3 * eps * frobenius_norm_sq(m).sqrt()
}

/// Inverse without diagnostics; used on hot paths.
pub(crate) fn invert(m: &Tensor, scheme: PrecisionScheme) -> Result<(Tensor, f64)> {
    if !m.is_square() {
        return Err(Error::shape(format!("inverse needs a square matrix, got {:?}", m.shape())));
    }
    let n = m.rows();
    match scheme {
        PrecisionScheme::Double => {
            let (x, piv) = lu_inverse_kernel::<f64>(m.data(), n, singularity_threshold(m, f64::EPSILON))?;
            Ok((Tensor::from_parts(vec![n, n], x, Precision::Double), piv))
        }
        PrecisionScheme::Float => {
            let stored = m.to_precision(Precision::Single);
            let thr = singularity_threshold(&stored, f32::EPSILON as f64);
            let (x, piv) = lu_inverse_kernel::<f32>(stored.data(), n, thr)?;
            let data = x.into_iter().map(|v| v as f64).collect();
            Ok((Tensor::from_parts(vec![n, n], data, Precision::Single), piv))
        }
        PrecisionScheme::FloatDouble => {
            let stored = m.to_precision(Precision::Single);
            let thr = singularity_threshold(&stored, f64::EPSILON);
            let (x, piv) = lu_inverse_kernel::<f64>(stored.data(), n, thr)?;
            Ok((Tensor::new(vec![n, n], x, Precision::Single)?, piv))
        }
    }
}

/// Inverts `m` by LU with partial pivoting under `scheme`.
///
/// A pivot below `1e3 * eps * ||m||_F` (with `eps` the epsilon of the
/// precision the factorization runs in) is reported as [`Error::Singular`].
pub fn lu_invert(m: &Tensor, scheme: PrecisionScheme) -> Result<(Tensor, InversionDiagnostics)> {
    let (inv, pivot_min_abs) = invert(m, scheme)?;
    let m64 = m.to_precision(Precision::Double);
    let inv64 = inv.to_precision(Precision::Double);
    let condition_estimate = norm_1(&m64) * norm_1(&inv64);
    let prod = matmul(&m64, &inv64)?;
    let n = m.rows();
    let mut recon = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = prod.get(i, j) - if i == j { 1.0 } else { 0.0 };
            recon += d * d;
        }
    }
    Ok((
        inv,
        InversionDiagnostics {
            pivot_min_abs,
            condition_estimate,
            reconstruction_error: recon.sqrt(),
        },
    ))
}

pub fn frobenius_norm_sq(m: &Tensor) -> f64 {
    m.data().iter().map(|v| v * v).sum()
}

/// Maximum absolute column sum.
pub fn norm_1(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    (0..c)
        .map(|j| (0..r).map(|i| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `|m_ii| > sum_{j != i} |m_ij|` for every row.
pub fn is_strictly_diagonally_dominant(m: &Tensor) -> bool {
    if !m.is_square() {
        return false;
    }
    (0..m.rows()).all(|i| {
        let row = m.row(i);
        let off: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v.abs())
            .sum();
        row[i].abs() > off
    })
}

/// Smallest per-row gap `|m_ii| - sum_{j != i} |m_ij|`; positive iff SDD.
pub fn dominance_margin(m: &Tensor) -> f64 {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let off: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.abs())
                .sum();
            row[i].abs() - off
        })
        .fold(f64::INFINITY, f64::min)
}

/// `||a - b||_F / max(||a||_F, 1e-30)`.
pub fn relative_fro_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "relative error")?;
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(diff.sqrt() / frobenius_norm_sq(a).sqrt().max(1e-30))
}

/// Standard-normal matrix with each diagonal entry replaced by
/// `1 + sum_{j != i} |m_ij|`, which makes it strictly diagonally dominant.
pub fn random_sdd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut m = random_normal(n, n, rng);
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
        m.set(i, i, 1.0 + off);
    }
    m
}

pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(vec![rows, cols], data, Precision::Double)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let p = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(
            matmul(&p, &b).unwrap(),
            Tensor::from_rows(&[[5.0, 6.0], [0.0, 0.0]])
        );
        assert_eq!(
            matmul(&m, &b).unwrap(),
            Tensor::from_rows(&[[19.0, 22.0], [43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        let s = a.to_precision(Precision::Single);
        assert!(matmul(&a, &s.transpose()).is_err());
    }

    #[test]
    fn single_precision_matmul_stays_single() {
        let a = Tensor::from_rows(&[[0.1, 0.2]]).to_precision(Precision::Single);
        let b = Tensor::from_rows(&[[0.3], [0.7]]).to_precision(Precision::Single);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.precision(), Precision::Single);
        let expect = (0.1f32 * 0.3f32) + (0.2f32 * 0.7f32);
        assert_eq!(c.data()[0], expect as f64);
    }

    #[test]
    fn inverse_examples() {
        let (inv, diag) = lu_invert(&Tensor::identity(3), PrecisionScheme::Double).unwrap();
        assert_eq!(inv, Tensor::identity(3));
        assert_eq!(diag.reconstruction_error, 0.0);

        let (inv, _) = lu_invert(&Tensor::diag(&[2.0, 4.0]), PrecisionScheme::Double).unwrap();
        assert_eq!(inv, Tensor::diag(&[0.5, 0.25]));

        let m = Tensor::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let (inv, diag) = lu_invert(&m, PrecisionScheme::Double).unwrap();
        let expect = Tensor::from_rows(&[[2.0 / 3.0, -1.0 / 3.0], [-1.0 / 3.0, 2.0 / 3.0]]);
        assert!(close(&inv, &expect, 1e-15));
        assert!(diag.pivot_min_abs > 0.0);
        // ||M||_1 = 3, ||M^-1||_1 = 1
        assert!((diag.condition_estimate - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_needs_pivoting() {
        let m = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let (inv, _) = lu_invert(&m, PrecisionScheme::Double).unwrap();
        assert_eq!(inv, m);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        match lu_invert(&m, PrecisionScheme::Double) {
            Err(Error::Singular { pivot }) => assert!(pivot < 1e-10),
            other => panic!("expected singular, got {other:?}"),
        }
        let tiny = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1e-20]]);
        assert!(matches!(
            lu_invert(&tiny, PrecisionScheme::Double),
            Err(Error::Singular { .. })
        ));
        assert!(lu_invert(&Tensor::zeros(&[2, 3]), PrecisionScheme::Double).is_err());
    }

    #[test]
    fn schemes_produce_expected_precision() {
        let m = Tensor::from_rows(&[[3.0, 0.1], [0.2, 5.0]]);
        let (d, _) = lu_invert(&m, PrecisionScheme::Double).unwrap();
        let (f, _) = lu_invert(&m, PrecisionScheme::Float).unwrap();
        let (fd, _) = lu_invert(&m, PrecisionScheme::FloatDouble).unwrap();
        assert_eq!(d.precision(), Precision::Double);
        assert_eq!(f.precision(), Precision::Single);
        assert_eq!(fd.precision(), Precision::Single);
        assert!(close(&d, &f, 1e-6));
        assert!(close(&d, &fd, 1e-6));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&Tensor::zeros(&[3, 3])), 0.0);
        assert_eq!(frobenius_norm_sq(&Tensor::identity(4)), 4.0);
        assert_eq!(
            frobenius_norm_sq(&Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]])),
            30.0
        );
    }

    #[test]
    fn sdd_examples() {
        assert!(is_strictly_diagonally_dominant(&Tensor::identity(3)));
        assert!(!is_strictly_diagonally_dominant(&Tensor::from_rows(&[
            [1.0, 1.0],
            [0.0, 1.0]
        ])));
        assert!(is_strictly_diagonally_dominant(&Tensor::from_rows(&[
            [3.0, -1.0, 1.0],
            [1.0, 4.0, 2.0],
            [0.0, 1.0, 2.0]
        ])));
    }

    #[test]
    fn relative_error_examples() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(relative_fro_error(&m, &m).unwrap(), 0.0);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(relative_fro_error(&z, &z).unwrap(), 0.0);
        let e = relative_fro_error(
            &Tensor::identity(2),
            &Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]),
        )
        .unwrap();
        assert!((e - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(relative_fro_error(&m, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn sdd_fixture_inverts_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 16, 40] {
            let m = random_sdd(n, &mut rng);
            assert!(is_strictly_diagonally_dominant(&m));
            let (_, d) = lu_invert(&m, PrecisionScheme::Double).unwrap();
            assert!(d.reconstruction_error < 1e-10, "n={n}: {}", d.reconstruction_error);
        }
    }
}
