//! Small dense linear-algebra helpers shared by the estimators and risk
//! evaluators. Everything here works on `nalgebra` dynamic matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR, SVD};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used by the pseudoinverse.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// Smallest eigenvalue a symmetric system may have before it is treated as
/// singular.
pub const SINGULAR_EIGENVALUE: f64 = 1e-12;

/// Negative eigenvalues down to this value are clamped to zero when taking a
/// positive semidefinite square root.
pub const PSD_TOLERANCE: f64 = 1e-10;

pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Minimum-norm least-squares solution of `design * theta ≈ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub theta: DVector<f64>,
    /// Singular values of `design`, padded with zeros up to the number of
    /// unknowns, in descending order.
    pub singular_values: Vec<f64>,
    pub rank_deficient: bool,
}

impl LeastSquares {
    pub fn min_singular_value(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

/// Solves `min ‖design θ − rhs‖` with the Moore–Penrose pseudoinverse.
///
/// `design` is reduced by a Householder QR first and the pseudoinverse is
/// applied through the SVD of the triangular factor, so tall designs with
/// millions of rows never form a Gram matrix. Singular values below
/// `PINV_RELATIVE_CUTOFF` times the largest are discarded.
pub fn least_squares_min_norm(design: DMatrix<f64>, rhs: &DVector<f64>) -> Result<LeastSquares> {
    let (rows, cols) = design.shape();
    if rhs.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: rhs.len(),
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(LeastSquares {
            theta: DVector::zeros(cols),
            singular_values: vec![0.0; cols],
            rank_deficient: true,
        });
    }

    let qr = QR::new(design);
    let mut projected = rhs.clone();
    qr.q_tr_mul(&mut projected);
    let r = qr.unpack_r();
    let k = r.nrows();
    let projected = projected.rows(0, k).into_owned();

    let svd = SVD::new(r, true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let cutoff = PINV_RELATIVE_CUTOFF * sigma_max;

    let mut theta = DVector::zeros(cols);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let coef = u.column(i).dot(&projected) / s;
            theta.axpy(coef, &v_t.row(i).transpose(), 1.0);
        }
    }

    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    singular_values.resize(cols, 0.0);
    let min = *singular_values.last().unwrap();
    let rank_deficient = sigma_max == 0.0 || min < cutoff;

    Ok(LeastSquares {
        theta,
        singular_values,
        rank_deficient,
    })
}

/// Solution of a symmetric positive (semi)definite system.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSolve {
    pub x: DVector<f64>,
    pub min_eigenvalue: f64,
    /// Set when the smallest eigenvalue is below `SINGULAR_EIGENVALUE`; `x`
    /// then holds the pseudo-inverse solution.
    pub singular: bool,
}

impl SymmetricSolve {
    pub fn into_result(self) -> Result<DVector<f64>> {
        if self.singular {
            Err(Error::Singular {
                min_eigenvalue: self.min_eigenvalue,
            })
        } else {
            Ok(self.x)
        }
    }
}

pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<SymmetricSolve> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.len(),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let min_eigenvalue = eig.eigenvalues.min();
    let mut x = DVector::zeros(b.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() >= SINGULAR_EIGENVALUE {
            let v = eig.eigenvectors.column(i);
            x.axpy(v.dot(b) / lambda, &v, 1.0);
        }
    }
    Ok(SymmetricSolve {
        x,
        min_eigenvalue,
        singular: min_eigenvalue < SINGULAR_EIGENVALUE,
    })
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.max()
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, l| m.max(l.abs()))
}

/// Spectral norm of an arbitrary matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SVD::new(a.clone(), false, false).singular_values.max()
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn psd_sqrt(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(q));
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}
