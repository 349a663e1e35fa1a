//! Task risks, population objectives and the finite-N post-adaptation loss.
//!
//! Every task risk is the quadratic `½(θ−θ_γ)ᵀQ_γ(θ−θ_γ) + ½σ_γ²`, so all
//! population objectives here are quadratics in θ and are evaluated exactly
//! over finite distributions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::task_model::{FiniteDistribution, TaskDistribution, TaskParams};

/// Distributions whose expectations can be taken exactly.
pub trait ExactExpectation {
    fn finite(&self) -> Result<&FiniteDistribution>;
}

impl ExactExpectation for FiniteDistribution {
    fn finite(&self) -> Result<&FiniteDistribution> {
        Ok(self)
    }
}

impl ExactExpectation for TaskDistribution {
    fn finite(&self) -> Result<&FiniteDistribution> {
        self.as_finite()
    }
}

/// Inner step size and number of points used by one adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub alpha: f64,
    pub n_adapt: usize,
}

impl AdaptationConfig {
    pub fn new(alpha: f64, n_adapt: usize) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if n_adapt == 0 {
            return Err(Error::InvalidArgument("n_adapt must be at least 1".into()));
        }
        Ok(AdaptationConfig { alpha, n_adapt })
    }
}

pub fn task_risk(theta: &DVector<f64>, task: &TaskParams) -> Result<f64> {
    check_dim(task.dim(), theta.len())?;
    let d = theta - &task.theta;
    Ok(0.5 * d.dot(&(&task.q * &d)) + 0.5 * task.noise_var)
}

pub fn task_risk_grad(theta: &DVector<f64>, task: &TaskParams) -> Result<DVector<f64>> {
    check_dim(task.dim(), theta.len())?;
    Ok(&task.q * (theta - &task.theta))
}

pub fn drs_population_risk(theta: &DVector<f64>, dist: &impl ExactExpectation) -> Result<f64> {
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    d.iter().map(|(t, w)| task_risk(theta, t).map(|r| w * r)).sum()
}

pub fn drs_population_risk_grad(theta: &DVector<f64>, dist: &impl ExactExpectation) -> Result<DVector<f64>> {
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    Ok(d.expect_vector(|t| &t.q * (theta - &t.theta)))
}

/// One exact gradient step on task `t` from θ: `θ − αQ(θ − θ_γ)`.
fn exact_adapt(theta: &DVector<f64>, t: &TaskParams, alpha: f64) -> DVector<f64> {
    theta - (&t.q * (theta - &t.theta)) * alpha
}

pub fn maml_population_risk(theta: &DVector<f64>, alpha: f64, dist: &impl ExactExpectation) -> Result<f64> {
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    d.iter()
        .map(|(t, w)| task_risk(&exact_adapt(theta, t, alpha), t).map(|r| w * r))
        .sum()
}

/// `E[S_γ(α)]θ − E[S_γ(α)θ_γ]`.
pub fn maml_population_risk_grad(theta: &DVector<f64>, alpha: f64, dist: &impl ExactExpectation) -> Result<DVector<f64>> {
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    Ok(d.expect_vector(|t| t.s_matrix(alpha) * (theta - &t.theta)))
}

/// `E[x xᵀ Q x xᵀ]` for `x ~ N(0, Q)`, which is `2Q³ + Q tr(Q²)`.
pub fn gaussian_fourth_moment(q: &DMatrix<f64>) -> DMatrix<f64> {
    let q2 = q * q;
    let q3 = &q2 * q;
    q3 * 2.0 + q * q2.trace()
}

/// `A_γ(α) = S_γ(α) + α²(E[x xᵀ Q x xᵀ] − Q³)/n`.
pub fn post_adapt_matrix(task: &TaskParams, alpha: f64, n: usize) -> DMatrix<f64> {
    let q2 = &task.q * &task.q;
    let q3 = &q2 * &task.q;
    let correction = (q3 + &task.q * q2.trace()) * (alpha * alpha / n.max(1) as f64);
    task.s_matrix(alpha) + correction
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("n must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Expected risk after one SGD step of size α on `n` fresh points, averaged
/// over tasks. Carries all constants, so at α = 0 it equals the DRS risk.
pub fn post_adapt_expected_loss(theta: &DVector<f64>, alpha: f64, n: usize, dist: &impl ExactExpectation) -> Result<f64> {
    check_n(n)?;
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    let scale = alpha * alpha / (2.0 * n as f64);
    Ok(d.expect_scalar(|t| {
        let dev = theta - &t.theta;
        let a = post_adapt_matrix(t, alpha, n);
        let tr_q2 = (&t.q * &t.q).trace();
        0.5 * dev.dot(&(a * &dev)) + 0.5 * t.noise_var + scale * t.noise_var * tr_q2
    }))
}

pub fn post_adapt_expected_loss_grad(theta: &DVector<f64>, alpha: f64, n: usize, dist: &impl ExactExpectation) -> Result<DVector<f64>> {
    check_n(n)?;
    let d = dist.finite()?;
    check_dim(d.dim(), theta.len())?;
    Ok(d.expect_vector(|t| post_adapt_matrix(t, alpha, n) * (theta - &t.theta)))
}

/// Loss after adaptation of the population MAML optimum, in the limit of
/// infinitely many adaptation points. At α = 0 this is the DRS risk of the
/// DRS optimum.
pub fn maml_optimum_post_loss(alpha: f64, dist: &impl ExactExpectation) -> Result<f64> {
    let d = dist.finite()?;
    let b = d.expect_vector(|t| t.s_matrix(alpha) * &t.theta);
    let opt = linalg::solve_symmetric(&d.expect_s(alpha), &b)?.into_result()?;
    // Deviation form: avoids cancelling two large terms.
    Ok(d.expect_scalar(|t| {
        let dev = &t.theta - &opt;
        0.5 * dev.dot(&(t.s_matrix(alpha) * &dev)) + 0.5 * t.noise_var
    }))
}

/// `½θᵀHθ − bᵀθ + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticLoss {
    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.hessian * theta)) - self.linear.dot(theta) + self.constant
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * theta - &self.linear
    }
}

/// Task moments from which the DRS risk and the post-adaptation loss for any
/// `(α, n)` are assembled in `O(p²)`. Used when the same distribution is
/// evaluated many times, e.g. over a Monte Carlo task sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMoments {
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    q3: DMatrix<f64>,
    /// `E[Q tr(Q²)]`
    qt: DMatrix<f64>,
    q1_theta: DVector<f64>,
    q2_theta: DVector<f64>,
    q3_theta: DVector<f64>,
    qt_theta: DVector<f64>,
    theta_q1_theta: f64,
    theta_q2_theta: f64,
    theta_q3_theta: f64,
    theta_qt_theta: f64,
    noise: f64,
    noise_tr_q2: f64,
}

impl LossMoments {
    pub fn new(dist: &impl ExactExpectation) -> Result<Self> {
        let d = dist.finite()?;
        let p = d.dim();
        let mut m = LossMoments {
            q1: DMatrix::zeros(p, p),
            q2: DMatrix::zeros(p, p),
            q3: DMatrix::zeros(p, p),
            qt: DMatrix::zeros(p, p),
            q1_theta: DVector::zeros(p),
            q2_theta: DVector::zeros(p),
            q3_theta: DVector::zeros(p),
            qt_theta: DVector::zeros(p),
            theta_q1_theta: 0.0,
            theta_q2_theta: 0.0,
            theta_q3_theta: 0.0,
            theta_qt_theta: 0.0,
            noise: 0.0,
            noise_tr_q2: 0.0,
        };
        for (t, w) in d.iter() {
            let q2 = &t.q * &t.q;
            let q3 = &q2 * &t.q;
            let tr = q2.trace();
            let qt = &t.q * tr;
            for (mat, acc_m, acc_v, acc_s) in [
                (&t.q, &mut m.q1, &mut m.q1_theta, &mut m.theta_q1_theta),
                (&q2, &mut m.q2, &mut m.q2_theta, &mut m.theta_q2_theta),
                (&q3, &mut m.q3, &mut m.q3_theta, &mut m.theta_q3_theta),
                (&qt, &mut m.qt, &mut m.qt_theta, &mut m.theta_qt_theta),
            ] {
                let v = mat * &t.theta;
                *acc_s += w * t.theta.dot(&v);
                *acc_m += mat * w;
                acc_v.axpy(w, &v, 1.0);
            }
            m.noise += w * t.noise_var;
            m.noise_tr_q2 += w * t.noise_var * tr;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.q1_theta.len()
    }

    pub fn drs(&self) -> QuadraticLoss {
        QuadraticLoss {
            hessian: self.q1.clone(),
            linear: self.q1_theta.clone(),
            constant: 0.5 * self.theta_q1_theta + 0.5 * self.noise,
        }
    }

    /// Post-adaptation loss; `n = None` is the infinite-data limit, which is
    /// the MAML population risk.
    pub fn post(&self, alpha: f64, n: Option<usize>) -> QuadraticLoss {
        if alpha == 0.0 {
            return self.drs();
        }
        let a2 = alpha * alpha;
        let c = n.map_or(0.0, |n| a2 / n.max(1) as f64);
        let h = &self.q1 - &self.q2 * (2.0 * alpha) + &self.q3 * (a2 + c) + &self.qt * c;
        let b = &self.q1_theta - &self.q2_theta * (2.0 * alpha) + &self.q3_theta * (a2 + c) + &self.qt_theta * c;
        let s = self.theta_q1_theta - 2.0 * alpha * self.theta_q2_theta
            + (a2 + c) * self.theta_q3_theta
            + c * self.theta_qt_theta;
        QuadraticLoss {
            hessian: h,
            linear: b,
            constant: 0.5 * s + 0.5 * self.noise + 0.5 * c * self.noise_tr_q2,
        }
    }
}
