//! Closed-form empirical estimators and population optima.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, SymmetricSolve};
use crate::risk::ExactExpectation;
use crate::task_model::MetaDataset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub theta_hat: DVector<f64>,
    /// Set when the smallest singular value of the design is below `1e-10`
    /// times the largest; `theta_hat` is then the minimum-norm solution.
    pub rank_deficient: bool,
    pub min_singular_value: f64,
}

fn least_squares(design_t: &DMatrix<f64>, y: &DVector<f64>) -> Result<EstimateResult> {
    let sol = linalg::least_squares_min_norm(design_t.transpose(), y)?;
    Ok(EstimateResult {
        min_singular_value: sol.min_singular_value(),
        rank_deficient: sol.rank_deficient,
        theta_hat: sol.theta,
    })
}

/// Least squares over all `2NM` observations: `θ̂ = (Xᵀ)⁺Y`.
pub fn solve_drs(data: &MetaDataset) -> Result<EstimateResult> {
    data.validate()?;
    let (x, y) = data.stacked_all();
    least_squares(&x, &y)
}

/// Stacks `W_j = (I − (α/N)X_{j1}X_{j1}ᵀ)X_{j2}` and
/// `Z_j = Y_{j2} − (α/N)X_{j2}ᵀX_{j1}Y_{j1}` over tasks.
pub fn build_maml_system(data: &MetaDataset, alpha: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    data.validate()?;
    let (p, n, m) = (data.p, data.n, data.m());
    let scale = alpha / n as f64;
    let mut w = DMatrix::zeros(p, n * m);
    let mut z = DVector::zeros(n * m);
    for (j, t) in data.tasks.iter().enumerate() {
        let gram = &t.x_support * t.x_support.transpose();
        let xy = &t.x_support * &t.y_support;
        let mut wj = w.columns_mut(j * n, n);
        wj.copy_from(&t.x_query);
        wj.gemm(-scale, &gram, &t.x_query, 1.0);
        let mut zj = z.rows_mut(j * n, n);
        zj.copy_from(&t.y_query);
        zj.gemv_tr(-scale, &t.x_query, &xy, 1.0);
    }
    Ok((w, z))
}

/// `θ̂_maml(α) = (W(α)ᵀ)⁺Z(α)`.
pub fn solve_maml(data: &MetaDataset, alpha: f64) -> Result<EstimateResult> {
    let (w, z) = build_maml_system(data, alpha)?;
    least_squares(&w, &z)
}

/// One SGD step on the data `(x, y)`: `θ − (α/N)(XXᵀθ − XY)`.
pub fn adapt(theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    check_dim(theta.len(), x.nrows())?;
    check_dim(x.ncols(), y.len())?;
    if x.ncols() == 0 {
        return Ok(theta.clone());
    }
    let residual = x.tr_mul(theta) - y;
    Ok(theta - (x * residual) * (alpha / x.ncols() as f64))
}

/// Sum of squared errors over every observation.
pub fn drs_objective(data: &MetaDataset, theta: &DVector<f64>) -> Result<f64> {
    check_dim(data.p, theta.len())?;
    Ok(data
        .tasks
        .iter()
        .flat_map(|t| [(&t.x_support, &t.y_support), (&t.x_query, &t.y_query)])
        .map(|(x, y)| (x.tr_mul(theta) - y).norm_squared())
        .sum())
}

/// Sum of squared query errors after adapting on each task's support half.
pub fn maml_objective(data: &MetaDataset, theta: &DVector<f64>, alpha: f64) -> Result<f64> {
    check_dim(data.p, theta.len())?;
    let mut total = 0.0;
    for t in &data.tasks {
        let adapted = adapt(theta, &t.x_support, &t.y_support, alpha)?;
        total += (t.x_query.tr_mul(&adapted) - &t.y_query).norm_squared();
    }
    Ok(total)
}

/// `E[Q]⁻¹E[Qθ_γ]`, with the singular flag instead of an error.
pub fn population_drs_solve(dist: &impl ExactExpectation) -> Result<SymmetricSolve> {
    let d = dist.finite()?;
    linalg::solve_symmetric(&d.expect_q(), &d.expect_vector(|t| &t.q * &t.theta))
}

/// `E[S(α)]⁻¹E[S(α)θ_γ]`, with the singular flag instead of an error.
pub fn population_maml_solve(dist: &impl ExactExpectation, alpha: f64) -> Result<SymmetricSolve> {
    let d = dist.finite()?;
    linalg::solve_symmetric(&d.expect_s(alpha), &d.expect_vector(|t| t.s_matrix(alpha) * &t.theta))
}

pub fn population_drs_optimum(dist: &impl ExactExpectation) -> Result<DVector<f64>> {
    population_drs_solve(dist)?.into_result()
}

pub fn population_maml_optimum(dist: &impl ExactExpectation, alpha: f64) -> Result<DVector<f64>> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    population_maml_solve(dist, alpha)?.into_result()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_model::{generate_dataset, FiniteDistribution, TaskData, TaskDistribution, TaskParams};
    use approx::assert_relative_eq;

    fn scalar(theta: f64, q: f64) -> TaskParams {
        TaskParams::scalar(theta, 0.0, q).unwrap()
    }

    #[test]
    fn scalar_drs_optimum() {
        let d = FiniteDistribution::uniform(vec![scalar(0.0, 1.0), scalar(2.0, 3.0)]).unwrap();
        assert_relative_eq!(population_drs_optimum(&d).unwrap()[0], 1.5, epsilon = 1e-15);
        assert_eq!(population_maml_optimum(&d, 0.0).unwrap(), population_drs_optimum(&d).unwrap());
    }

    #[test]
    fn scalar_maml_optimum() {
        // S = (1 − αq)²q: 0.5625 for q=1 and 0.1875 for q=3 at α = 0.25.
        let d = FiniteDistribution::uniform(vec![scalar(0.0, 1.0), scalar(2.0, 3.0)]).unwrap();
        let expected = (0.1875 * 2.0) / (0.5625 + 0.1875);
        assert_relative_eq!(population_maml_optimum(&d, 0.25).unwrap()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn singular_population_system() {
        let d = FiniteDistribution::single(scalar(1.0, 0.0)).unwrap();
        assert!(matches!(population_drs_optimum(&d), Err(Error::Singular { .. })));
        assert!(population_drs_solve(&d).unwrap().singular);
    }

    #[test]
    fn zero_response_gives_zero_estimate() {
        let ds = generate_dataset(&TaskDistribution::paper_simulation(2), 2, 3, 0).unwrap();
        let mut zeroed = ds.clone();
        for t in &mut zeroed.tasks {
            t.y_support.fill(0.0);
            t.y_query.fill(0.0);
        }
        assert_eq!(solve_drs(&zeroed).unwrap().theta_hat, DVector::zeros(2));
        assert_eq!(solve_maml(&zeroed, 0.3).unwrap().theta_hat, DVector::zeros(2));
    }

    #[test]
    fn maml_system_shapes_and_alpha_zero() {
        let ds = generate_dataset(&TaskDistribution::paper_simulation(2), 3, 4, 5).unwrap();
        let (w, z) = build_maml_system(&ds, 0.0).unwrap();
        assert_eq!(w.shape(), (2, 12));
        assert_eq!(z.len(), 12);
        let (xq, yq) = ds.stacked_query();
        assert_eq!(w, xq);
        assert_eq!(z, yq);
    }

    #[test]
    fn adapt_edge_cases() {
        let theta = DVector::from_vec(vec![1.0, 2.0]);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let y = DVector::from_vec(vec![0.1, 0.2]);
        assert_eq!(adapt(&theta, &x, &y, 0.0).unwrap(), theta);
        assert_eq!(adapt(&theta, &DMatrix::zeros(2, 2), &DVector::zeros(2), 0.7).unwrap(), theta);
        let fixed = x.tr_mul(&theta);
        assert_eq!(adapt(&theta, &x, &fixed, 0.7).unwrap(), theta);
        assert!(adapt(&theta, &x, &DVector::zeros(3), 0.1).is_err());
    }

    #[test]
    fn objectives_agree_with_system() {
        let ds = generate_dataset(&TaskDistribution::paper_simulation(2), 3, 4, 8).unwrap();
        let theta = DVector::from_vec(vec![0.4, -1.1]);
        let (w, z) = build_maml_system(&ds, 0.35).unwrap();
        let via_system = (w.tr_mul(&theta) - z).norm_squared();
        assert_relative_eq!(maml_objective(&ds, &theta, 0.35).unwrap(), via_system, epsilon = 1e-10);
    }

    #[test]
    fn single_observation_is_rank_deficient_in_two_dims() {
        let t = TaskData {
            x_support: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            x_query: DMatrix::from_row_slice(2, 1, &[2.0, 2.0]),
            y_support: DVector::from_vec(vec![2.0]),
            y_query: DVector::from_vec(vec![4.0]),
        };
        let ds = MetaDataset::new(2, 1, vec![t], None).unwrap();
        let est = solve_drs(&ds).unwrap();
        assert!(est.rank_deficient);
        assert_relative_eq!(est.theta_hat, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-12);
    }
}
