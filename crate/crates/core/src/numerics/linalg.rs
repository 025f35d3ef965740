use nalgebra::DMatrix;

use super::{Matrix, RngState};
use crate::error::{Error, Result};

/// Whether an operand of [`gemm`] is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

fn op_shape(m: &Matrix, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows(), m.cols()),
        Op::T => (m.cols(), m.rows()),
    }
}

fn op_strides(m: &Matrix, op: Op) -> (isize, isize) {
    let (rs, cs) = (m.cols() as isize, 1isize);
    match op {
        Op::N => (rs, cs),
        Op::T => (cs, rs),
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c`.
///
/// Single-threaded and blocked; the accumulation order depends only on the
/// shapes, so results are bitwise reproducible.
pub fn gemm(alpha: f64, a: &Matrix, op_a: Op, b: &Matrix, op_b: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = op_shape(a, op_a);
    let (k2, n) = op_shape(b, op_b);
    if k != k2 {
        return Err(Error::DimensionMismatch {
            op: "gemm",
            left: (m, k),
            right: (k2, n),
        });
    }
    if c.shape() != (m, n) {
        return Err(Error::DimensionMismatch {
            op: "gemm output",
            left: (m, n),
            right: c.shape(),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale_in_place(beta);
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, op_a);
    let (rsb, csb) = op_strides(b, op_b);
    let rsc = n as isize;
    // SAFETY: the strides above describe exactly the row-major buffers of
    // `a`, `b` and `c`, whose lengths were validated through their shapes;
    // `c` is borrowed mutably and cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_slice().as_ptr(),
            rsa,
            csa,
            b.as_slice().as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_slice().as_mut_ptr(),
            rsc,
            1,
        );
    }
    Ok(())
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_op(a, Op::N, b, Op::N)
}

pub fn matmul_op(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op) -> Result<Matrix> {
    let (m, _) = op_shape(a, op_a);
    let (_, n) = op_shape(b, op_b);
    let mut c = Matrix::zeros(m, n);
    gemm(1.0, a, op_a, b, op_b, 0.0, &mut c)?;
    Ok(c)
}

/// `a · v` for a vector `v`.
pub fn matvec(a: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if a.cols() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            left: a.shape(),
            right: (v.len(), 1),
        });
    }
    Ok((0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect())
}

/// `‖A Aᵀ − I‖_F`.
pub fn gram_residual(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut g = matmul_op(a, Op::N, a, Op::T)?;
    for i in 0..a.rows() {
        g[(i, i)] -= 1.0;
    }
    Ok(g.frobenius_norm())
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.max_abs()
}

/// Thin singular value decomposition `A = U · diag(s) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    /// Singular values, descending.
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors have consistent shapes")
    }

    /// Orthogonal polar factor `U Vᵀ`.
    pub fn polar_factor(&self) -> Matrix {
        matmul(&self.u, &self.vt).expect("svd factors have consistent shapes")
    }
}

const SVD_MAX_ITERS: usize = 10_000;

fn to_nalgebra(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn check_finite(a: &Matrix, ctx: &'static str) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(ctx))
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    check_finite(a, "svd input")?;
    let svd = nalgebra::linalg::SVD::try_new(to_nalgebra(a), true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::SvdNoConvergence {
            iterations: SVD_MAX_ITERS,
        })?;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = from_nalgebra(u);
    let vt = from_nalgebra(vt);
    let u = Matrix::from_fn(u.rows(), order.len(), |i, j| u[(i, order[j])]);
    let vt = Matrix::from_fn(order.len(), vt.cols(), |i, j| vt[(order[i], j)]);
    Ok(SvdResult { u, s, vt })
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    check_finite(a, "svd input")?;
    let svd = nalgebra::linalg::SVD::try_new(to_nalgebra(a), false, false, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::SvdNoConvergence {
            iterations: SVD_MAX_ITERS,
        })?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Default number of power iterations for σ_max estimates.
pub const DEFAULT_POWER_ITERS: usize = 100;

/// Estimate of the largest singular value by power iteration on `AᵀA`,
/// started from a Gaussian vector drawn from `rng`.
pub fn power_iteration_sigma_max(a: &Matrix, iters: usize, rng: &mut RngState) -> f64 {
    let n = a.cols();
    if n == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return sigma;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av = matvec(a, &v).expect("shapes agree");
        sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        // v ← Aᵀ A v
        let mut next = vec![0.0; n];
        for (i, &avi) in av.iter().enumerate() {
            for (nx, aij) in next.iter_mut().zip(a.row(i)) {
                *nx += aij * avi;
            }
        }
        v = next;
    }
    sigma
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix
/// with the columns of Q rescaled by the signs of diag(R).
pub fn sample_uniform_orthogonal(n: usize, rng: &mut RngState) -> Matrix {
    assert!(n >= 1, "orthogonal group of dimension 0");
    // Filled row by row so the draw order does not depend on nalgebra's layout.
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = rng.normal();
        }
    }
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    Matrix::from_fn(n, n, |i, j| {
        let d = r[(j, j)];
        let sign = if d < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Reference algorithms used only to check the main paths.

    use super::*;

    pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = acc;
            }
        }
        c
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    pub fn jacobi_eigenvalues(sym: &Matrix) -> Vec<f64> {
        let n = sym.rows();
        let mut a = sym.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    /// Singular values via Jacobi eigenvalues of `AᵀA`.
    pub fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
        let ata = naive_matmul(&a.transpose(), a);
        jacobi_eigenvalues(&ata).into_iter().map(|l| l.max(0.0).sqrt()).collect()
    }
}
