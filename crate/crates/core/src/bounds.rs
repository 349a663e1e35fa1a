//! Closed-form bound evaluators: SGD sample complexity for DRS and MAML,
//! statistical error of the linear-regression estimators, and the
//! concentration inequalities behind them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{population_drs_optimum, population_maml_optimum};
use crate::linalg;
use crate::risk::ExactExpectation;
use crate::rng::stream;

/// Regularity constants of the task losses and their oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessConstants {
    /// Δ: bound on the task risks.
    pub delta: f64,
    /// L: Lipschitz constant of the task risks.
    pub lipschitz_l: f64,
    /// μ: smoothness of the task risks.
    pub smooth_mu: f64,
    /// μᴴ: Lipschitz constant of the Hessians.
    pub hessian_lip: f64,
    /// Vᵈ: variance of one gradient oracle call.
    pub grad_var_data: f64,
    /// Vᵗ: variance of the task gradient across tasks.
    pub grad_var_task: f64,
    /// Vʰ: variance of one Hessian oracle call.
    pub hess_var: f64,
}

impl SmoothnessConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("delta", self.delta),
            ("lipschitz_l", self.lipschitz_l),
            ("smooth_mu", self.smooth_mu),
            ("hessian_lip", self.hessian_lip),
            ("grad_var_data", self.grad_var_data),
            ("grad_var_task", self.grad_var_task),
            ("hess_var", self.hess_var),
        ];
        for (name, v) in all {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.smooth_mu <= 0.0 {
            return Err(Error::InvalidArgument("smooth_mu must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSchedule {
    pub t_train: usize,
    pub t_test: usize,
    pub m: usize,
    pub n: usize,
    /// Hessian oracle calls per task per MAML step.
    pub d_hessian: usize,
    pub lr_train: f64,
    pub lr_test: f64,
    pub alpha: f64,
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("m and n must be at least 1".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    fn check_rates(&self) -> Result<()> {
        if !(self.lr_train > 0.0 && self.lr_test > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `(C_tr, C_te)` of the DRS sample-complexity bound.
pub fn drs_complexity_constants(c: &SmoothnessConstants, m: usize, n: usize) -> (f64, f64) {
    let (m, n) = (m.max(1) as f64, n.max(1) as f64);
    let l2 = c.lipschitz_l * c.lipschitz_l;
    let c_tr = c.smooth_mu * (l2 + c.grad_var_task / m + c.grad_var_data / (2.0 * n * m));
    let c_te = c.smooth_mu * (l2 + c.grad_var_data / n);
    (c_tr, c_te)
}

/// `(C_tr, C_te)` of the MAML sample-complexity bound. `C_te` is the DRS one.
pub fn maml_complexity_constants(c: &SmoothnessConstants, m: usize, n: usize, alpha: f64) -> (f64, f64) {
    let (mf, nf) = (m.max(1) as f64, n.max(1) as f64);
    let mu = c.smooth_mu;
    let l = c.lipschitz_l;
    let rho = 1.0 + alpha * mu;
    let smooth = 4.0 * mu + 2.0 * c.hessian_lip * alpha * l;
    let inner = (2.0 + 40.0 / mf) * rho * rho * l * l
        + 14.0 * c.grad_var_task / mf
        + 3.0 * c.grad_var_data * (1.0 + alpha * alpha * mu * mu * mf) / (mf * nf);
    (smooth * inner, drs_complexity_constants(c, m, n).1)
}

/// Checks `α ≤ 1/(6μ)` and `D ≥ 2α²Vʰ`.
pub fn check_maml_assumptions(c: &SmoothnessConstants, sched: &SgdSchedule) -> Result<()> {
    let limit = 1.0 / (6.0 * c.smooth_mu);
    if sched.alpha > limit + 1e-12 {
        return Err(Error::AssumptionViolation(format!(
            "alpha = {} exceeds 1/(6 mu) = {limit}",
            sched.alpha
        )));
    }
    let need = 2.0 * sched.alpha * sched.alpha * c.hess_var;
    if (sched.d_hessian as f64) < need {
        return Err(Error::AssumptionViolation(format!(
            "d_hessian = {} is below 2 alpha^2 V^h = {need}",
            sched.d_hessian
        )));
    }
    Ok(())
}

/// Bias term `T_tr αμ(1+αμ)²L√(Vᵈ/N)` of the MAML bound.
pub fn maml_bias_term(c: &SmoothnessConstants, sched: &SgdSchedule) -> f64 {
    let am = sched.alpha * c.smooth_mu;
    sched.t_train as f64 * am * (1.0 + am).powi(2) * c.lipschitz_l * (c.grad_var_data / sched.n.max(1) as f64).sqrt()
}

/// Bound on the per-step bias of the MAML stochastic gradient,
/// `(1+αμ)αμ√(Vᵈ/N)`.
pub fn maml_step_bias_bound(c: &SmoothnessConstants, alpha: f64, n: usize) -> f64 {
    let am = alpha * c.smooth_mu;
    (1.0 + am) * am * (c.grad_var_data / n.max(1) as f64).sqrt()
}

fn weighted_cost(c_tr: f64, c_te: f64, sched: &SgdSchedule) -> f64 {
    c_tr * sched.t_train as f64 + c_te * sched.t_test as f64
}

/// Learning-rate-optimized DRS bound `√(0.5(Δ+Λ)(C_tr T_tr + C_te T_te))`.
pub fn drs_complexity_bound(c: &SmoothnessConstants, lambda_drs: f64, sched: &SgdSchedule) -> Result<f64> {
    c.validate()?;
    sched.validate()?;
    let (c_tr, c_te) = drs_complexity_constants(c, sched.m, sched.n);
    Ok((0.5 * (c.delta + lambda_drs) * weighted_cost(c_tr, c_te, sched)).sqrt())
}

/// Learning-rate-optimized MAML bound, bias term included.
pub fn maml_complexity_bound(c: &SmoothnessConstants, lambda_maml: f64, sched: &SgdSchedule) -> Result<f64> {
    c.validate()?;
    sched.validate()?;
    check_maml_assumptions(c, sched)?;
    let (c_tr, c_te) = maml_complexity_constants(c, sched.m, sched.n, sched.alpha);
    let a = c.delta + lambda_maml + sched.alpha * c.lipschitz_l * c.lipschitz_l;
    Ok(maml_bias_term(c, sched) + (0.5 * a * weighted_cost(c_tr, c_te, sched)).sqrt())
}

/// Bound before the learning rates are optimized, for explicit `β_tr`, `β_te`.
pub fn drs_complexity_bound_two_rate(c: &SmoothnessConstants, lambda_drs: f64, sched: &SgdSchedule) -> Result<f64> {
    c.validate()?;
    sched.validate()?;
    sched.check_rates()?;
    let (c_tr, c_te) = drs_complexity_constants(c, sched.m, sched.n);
    let lr_min = sched.lr_train.min(sched.lr_test);
    Ok((c.delta + lambda_drs) / lr_min
        + 0.5 * (sched.lr_train * c_tr * sched.t_train as f64 + sched.lr_test * c_te * sched.t_test as f64))
}

pub fn maml_complexity_bound_two_rate(c: &SmoothnessConstants, lambda_maml: f64, sched: &SgdSchedule) -> Result<f64> {
    c.validate()?;
    sched.validate()?;
    sched.check_rates()?;
    check_maml_assumptions(c, sched)?;
    let (c_tr, c_te) = maml_complexity_constants(c, sched.m, sched.n, sched.alpha);
    let lr_min = sched.lr_train.min(sched.lr_test);
    let a = c.delta + lambda_maml + sched.alpha * c.lipschitz_l * c.lipschitz_l;
    Ok(a / lr_min
        + maml_bias_term(c, sched)
        + 0.5 * (sched.lr_train * c_tr * sched.t_train as f64 + sched.lr_test * c_te * sched.t_test as f64))
}

/// Equal learning rate minimizing the two-rate bound, `√(a / b)` with
/// `b = (C_tr T_tr + C_te T_te)/2`. `None` when there are no steps.
fn optimal_rate(a: f64, c_tr: f64, c_te: f64, sched: &SgdSchedule) -> Option<f64> {
    let b = 0.5 * weighted_cost(c_tr, c_te, sched);
    (b > 0.0 && a > 0.0).then(|| (a / b).sqrt())
}

pub fn drs_optimal_rate(c: &SmoothnessConstants, lambda_drs: f64, sched: &SgdSchedule) -> Option<f64> {
    let (c_tr, c_te) = drs_complexity_constants(c, sched.m, sched.n);
    optimal_rate(c.delta + lambda_drs, c_tr, c_te, sched)
}

pub fn maml_optimal_rate(c: &SmoothnessConstants, lambda_maml: f64, sched: &SgdSchedule) -> Option<f64> {
    let (c_tr, c_te) = maml_complexity_constants(c, sched.m, sched.n, sched.alpha);
    let a = c.delta + lambda_maml + sched.alpha * c.lipschitz_l * c.lipschitz_l;
    optimal_rate(a, c_tr, c_te, sched)
}

/// Inputs of the statistical-error bounds for meta linear regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinRegBoundInputs {
    /// β with `‖Q_γ‖ ≤ β`.
    pub q_norm_bound: f64,
    /// τ with `‖θ_γ − θ*_drs‖ ≤ τ`.
    pub tau: f64,
    /// τ′ with `‖θ_γ − θ*_maml(α)‖ ≤ τ′`.
    pub tau_prime: f64,
    pub eta: f64,
    pub xi: f64,
    pub phi: f64,
    pub subgauss_k: f64,
    #[serde(default = "one")]
    pub univ_c: f64,
    pub p: usize,
    /// Log factor; derived from `delta` when absent.
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub var_q_norm: f64,
    pub var_qtheta_trace: f64,
    pub var_s_norm: f64,
    pub var_stheta_trace: f64,
    pub noise_weighted_trace: f64,
    pub lambda_min_eq: f64,
    pub lambda_min_es: f64,
    pub theta_star_norms: (f64, f64),
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

fn variance_terms(values: &[(DMatrix<f64>, DVector<f64>)], weights: &[f64]) -> (f64, f64) {
    let p = values[0].1.len();
    let mut mean_m = DMatrix::zeros(p, p);
    let mut mean_v = DVector::zeros(p);
    for ((m, v), w) in values.iter().zip(weights) {
        mean_m += m * *w;
        mean_v += v * *w;
    }
    let mut var_m = DMatrix::zeros(p, p);
    let mut var_v = 0.0;
    for ((m, v), w) in values.iter().zip(weights) {
        let d = m - &mean_m;
        var_m += (&d * &d) * *w;
        var_v += w * (v - &mean_v).norm_squared();
    }
    (linalg::symmetric_norm(&var_m), var_v)
}

impl LinRegBoundInputs {
    /// Computes every distribution functional exactly. ξ and φ are unbounded
    /// for Gaussian data and are reported as infinite; the leading-order
    /// bounds do not use them.
    pub fn from_finite(dist: &impl ExactExpectation, alpha: f64) -> Result<Self> {
        let d = dist.finite()?;
        let star_drs = population_drs_optimum(d)?;
        let star_maml = population_maml_optimum(d, alpha)?;
        let weights = d.weights();
        let qs: Vec<_> = d.tasks().iter().map(|t| (t.q.clone(), &t.q * &t.theta)).collect();
        let ss: Vec<_> = d
            .tasks()
            .iter()
            .map(|t| {
                let s = t.s_matrix(alpha);
                let st = &s * &t.theta;
                (s, st)
            })
            .collect();
        let (var_q_norm, var_qtheta_trace) = variance_terms(&qs, weights);
        let (var_s_norm, var_stheta_trace) = variance_terms(&ss, weights);
        let max_dev = |star: &DVector<f64>| d.tasks().iter().map(|t| (&t.theta - star).norm()).fold(0.0, f64::max);
        let (phi, xi) = if d.tasks().iter().all(|t| t.noise_var == 0.0) {
            (0.0, f64::INFINITY)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        Ok(LinRegBoundInputs {
            q_norm_bound: d.max_q_norm(),
            tau: max_dev(&star_drs),
            tau_prime: max_dev(&star_maml),
            eta: d.max_theta_norm(),
            xi,
            phi,
            subgauss_k: 1.0,
            univ_c: 1.0,
            p: d.dim(),
            omega: None,
            delta: default_delta(),
            var_q_norm,
            var_qtheta_trace,
            var_s_norm,
            var_stheta_trace,
            noise_weighted_trace: d.expect_matrix(|t| &t.q * t.noise_var).trace(),
            lambda_min_eq: linalg::min_eigenvalue(&d.expect_q()),
            lambda_min_es: linalg::min_eigenvalue(&d.expect_s(alpha)),
            theta_star_norms: (star_drs.norm(), star_maml.norm()),
        })
    }

    fn c2(&self, omega: f64) -> f64 {
        self.q_norm_bound * self.univ_c * self.subgauss_k.powi(2) * (self.p as f64 + omega).sqrt()
    }

    fn c3(&self, omega: f64) -> f64 {
        (self.noise_weighted_trace * omega).sqrt()
    }
}

pub fn c1(omega: f64, r: f64, s: f64, theta_norm: f64) -> f64 {
    theta_norm * (2.0 * r * omega).sqrt() + (2.0 * s * omega).sqrt()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `ln(pM + 2M + 2p + 1) − ln(δ/2)`.
pub fn omega_drs(p: usize, m: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let (p, m) = (p as f64, m as f64);
    Ok((p * m + 2.0 * m + 2.0 * p + 1.0).ln() - (delta / 2.0).ln())
}

/// `ln(2pM + 4M + 2p + 1) − ln(δ/2)`.
pub fn omega_maml(p: usize, m: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let (p, m) = (p as f64, m as f64);
    Ok((2.0 * p * m + 4.0 * m + 2.0 * p + 1.0).ln() - (delta / 2.0).ln())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::Singular { min_eigenvalue: lambda })
    }
}

fn check_counts(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        Err(Error::InvalidArgument("m and n must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Leading-order bound on `‖θ̂_drs − θ*_drs‖`; lower-order remainders are
/// dropped.
pub fn drs_statistical_bound(inp: &LinRegBoundInputs, m: usize, n: usize) -> Result<f64> {
    check_counts(m, n)?;
    check_lambda(inp.lambda_min_eq)?;
    let omega = match inp.omega {
        Some(w) => w,
        None => omega_drs(inp.p, m, inp.delta)?,
    };
    let a = c1(omega, inp.var_q_norm, inp.var_qtheta_trace, inp.theta_star_norms.0) / (m as f64).sqrt();
    let b = (inp.tau * inp.c2(omega) / 2f64.sqrt() + inp.c3(omega)) / (n as f64).sqrt();
    Ok((a + b) / inp.lambda_min_eq)
}

/// Leading-order bound on `‖θ̂_maml(α) − θ*_maml(α)‖`.
pub fn maml_statistical_bound(inp: &LinRegBoundInputs, m: usize, n: usize, alpha: f64) -> Result<f64> {
    check_counts(m, n)?;
    check_lambda(inp.lambda_min_es)?;
    let omega = match inp.omega {
        Some(w) => w,
        None => omega_maml(inp.p, m, inp.delta)?,
    };
    let ab = alpha * inp.q_norm_bound;
    let a = c1(omega, inp.var_s_norm, inp.var_stheta_trace, inp.theta_star_norms.1) / (m as f64).sqrt();
    let b = ((1.0 + 3.0 * ab).powi(2) * inp.tau_prime * inp.c2(omega)
        + 2f64.sqrt() * (1.0 + ab).powi(2) * inp.c3(omega))
        / (n as f64).sqrt();
    Ok((a + b) / inp.lambda_min_es)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")))
    }
}

/// Matrix Bernstein bound on `‖Σ_{j≤M}(Q_j − E[Q])‖` holding with
/// probability `1 − ρ` when `‖Q_j‖ ≤ β`.
pub fn bernstein_rhs_symmetric(beta: f64, var_norm: f64, m: usize, p: usize, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let log = (2.0 * p as f64 / rho).ln();
    Ok(2.0 * beta / 3.0 * log + (2.0 * m as f64 * var_norm * log).sqrt())
}

/// Sub-Gaussian covariance-estimation bound on `‖XXᵀ/N − Q‖`.
pub fn covariance_rhs(beta: f64, subgauss_k: f64, univ_c: f64, n: usize, p: usize, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let r = (p as f64 + (2.0 / rho).ln()) / n.max(1) as f64;
    Ok(beta * univ_c * subgauss_k * subgauss_k * (r.sqrt() + r))
}

/// Smallest constant `C` such that at most `⌊ρ·len⌋` of the `ratios` reach
/// it. Each ratio is an observed deviation divided by the bound at `C = 1`.
pub fn smallest_constant(ratios: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("no ratios".into()));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (rho * sorted.len() as f64).floor() as usize;
    if allowed >= sorted.len() {
        return Ok(0.0);
    }
    // Strictly above the (allowed+1)-th largest ratio.
    let r = sorted[allowed].max(0.0);
    Ok(r * (1.0 + 4.0 * f64::EPSILON) + f64::MIN_POSITIVE)
}

/// Fits the universal constant of [`covariance_rhs`] on Gaussian data
/// `x ~ N(0, q)` so that the empirical violation rate over `trials` is at
/// most `rho`.
pub fn calibrate_covariance_constant(
    q: &DMatrix<f64>,
    subgauss_k: f64,
    n: usize,
    rho: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let root = linalg::psd_sqrt(q)?;
    let p = q.nrows();
    let beta = linalg::symmetric_norm(q);
    let unit = covariance_rhs(beta, subgauss_k, 1.0, n, p, rho)?;
    if unit == 0.0 {
        return Ok(0.0);
    }
    let ratios: Vec<f64> = (0..trials as u64)
        .map(|t| {
            let mut rng = stream(seed, &[t]);
            let z = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &root * z;
            let dev = (&x * x.transpose()) / n as f64 - q;
            linalg::symmetric_norm(&dev) / unit
        })
        .collect();
    smallest_constant(&ratios, rho)
}
