//! SGD meta-training and meta-testing on quadratic tasks with noisy
//! gradient and Hessian oracles, used to check the sample-complexity bounds
//! empirically.
//!
//! Iterates live in the ball `‖θ‖ ≤ R`. Quadratic risks are unbounded on the
//! whole space, so the risk bound Δ and the Lipschitz constant L are taken
//! over this ball, and by default every update is projected back onto it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, SgdSchedule, SmoothnessConstants};
use crate::error::{Error, Result};
use crate::estimators::{population_drs_solve, population_maml_solve};
use crate::linalg;
use crate::risk::{drs_population_risk, drs_population_risk_grad, maml_population_risk, maml_population_risk_grad};
use crate::rng::{derive_seed, stream, SimRng};
use crate::task_model::{FiniteDistribution, TaskParams};

// Stream labels. Each oracle family has its own stream per (step, task) so
// that changing one family's call count leaves the others untouched.
const TASK: u64 = 1;
const OUTER: u64 = 2;
const INNER: u64 = 3;
const HESS: u64 = 4;
const TEST_TASK: u64 = 5;
const TEST: u64 = 6;
const TRAIN: u64 = 7;

/// Noise levels of the oracles and the domain the iterates live in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    /// Trace of the gradient-noise covariance, Vᵈ.
    pub grad_var_data: f64,
    /// `E‖h − Q‖_F²`, Vʰ.
    pub hess_var: f64,
    pub domain_radius: f64,
    /// Project every iterate back onto the domain ball.
    #[serde(default = "yes")]
    pub project: bool,
}

fn yes() -> bool {
    true
}

impl OracleSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_var_data >= 0.0 && self.hess_var >= 0.0) {
            return Err(Error::InvalidArgument("oracle variances must be nonnegative".into()));
        }
        if self.domain_radius <= 0.0 || !self.domain_radius.is_finite() {
            return Err(Error::InvalidArgument("domain_radius must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One task together with its oracle settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTask {
    pub task: TaskParams,
    pub oracle: OracleSettings,
}

fn grad_with(task: &TaskParams, oracle: &OracleSettings, theta: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
    let mut g = &task.q * (theta - &task.theta);
    if oracle.grad_var_data > 0.0 {
        let sd = (oracle.grad_var_data / theta.len() as f64).sqrt();
        for v in g.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    g
}

fn hess_with(task: &TaskParams, oracle: &OracleSettings, rng: &mut SimRng) -> DMatrix<f64> {
    let p = task.dim();
    let mut h = task.q.clone();
    if oracle.hess_var > 0.0 {
        // (G + Gᵀ)/2 has E‖·‖_F² = p(p+1)/2 for standard Gaussian G.
        let scale = (oracle.hess_var / (p * (p + 1) / 2) as f64).sqrt();
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        h += (&g + g.transpose()) * (0.5 * scale);
    }
    h
}

/// Unbiased gradient `Q(θ − θ_γ) + noise` with noise covariance `(Vᵈ/p)I`.
pub fn grad_oracle(task: &OracleTask, theta: &DVector<f64>, seed: u64) -> DVector<f64> {
    grad_with(&task.task, &task.oracle, theta, &mut stream(seed, &[]))
}

/// Unbiased symmetric Hessian `Q + noise` with `E‖noise‖_F² = Vʰ`.
pub fn hess_oracle(task: &OracleTask, _theta: &DVector<f64>, seed: u64) -> DMatrix<f64> {
    hess_with(&task.task, &task.oracle, &mut stream(seed, &[]))
}

fn mean_grad(task: &TaskParams, oracle: &OracleSettings, theta: &DVector<f64>, calls: usize, rng: &mut SimRng) -> DVector<f64> {
    let mut acc = DVector::zeros(theta.len());
    for _ in 0..calls {
        acc += grad_with(task, oracle, theta, rng);
    }
    acc / calls as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdTrace {
    /// Iterates `θ⁰ … θᵀ`.
    pub theta_path: Vec<DVector<f64>>,
    pub grad_norm_sq_train: Vec<f64>,
    pub grad_norm_sq_test: Vec<f64>,
    pub lhs_sum: f64,
    /// Some iterate left the ball of radius `10R`.
    pub diverged: bool,
    /// Number of updates that were projected back onto the domain.
    pub projections: usize,
}

impl SgdTrace {
    fn new(theta0: &DVector<f64>) -> Self {
        SgdTrace {
            theta_path: vec![theta0.clone()],
            grad_norm_sq_train: Vec::new(),
            grad_norm_sq_test: Vec::new(),
            lhs_sum: 0.0,
            diverged: false,
            projections: 0,
        }
    }

    pub fn last(&self) -> &DVector<f64> {
        self.theta_path.last().expect("trace holds the starting point")
    }

    fn step(&mut self, theta: DVector<f64>, oracle: &OracleSettings) {
        let mut theta = theta;
        let norm = theta.norm();
        if !norm.is_finite() || norm > 10.0 * oracle.domain_radius {
            self.diverged = true;
        }
        if oracle.project && norm > oracle.domain_radius {
            theta *= oracle.domain_radius / norm;
            self.projections += 1;
        }
        self.theta_path.push(theta);
    }

    fn finish(mut self) -> Self {
        self.lhs_sum = self.grad_norm_sq_train.iter().sum::<f64>() + self.grad_norm_sq_test.iter().sum::<f64>();
        self
    }
}

fn check_start(dist: &FiniteDistribution, theta0: &DVector<f64>, oracle: &OracleSettings) -> Result<()> {
    oracle.validate()?;
    crate::error::check_dim(dist.dim(), theta0.len())
}

/// Meta-training on the DRS objective: each step averages `2N` gradient
/// calls on each of `M` freshly sampled tasks.
pub fn drs_meta_sgd(
    dist: &FiniteDistribution,
    oracle: &OracleSettings,
    sched: &SgdSchedule,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<SgdTrace> {
    sched.validate()?;
    check_start(dist, theta0, oracle)?;
    let mut trace = SgdTrace::new(theta0);
    for t in 0..sched.t_train as u64 {
        let theta = trace.last().clone();
        trace.grad_norm_sq_train.push(drs_population_risk_grad(&theta, dist)?.norm_squared());
        let mut g = DVector::zeros(theta.len());
        for j in 0..sched.m as u64 {
            let task = &dist.tasks()[dist.sample_index(&mut stream(seed, &[TASK, t, j]))];
            g += mean_grad(task, oracle, &theta, 2 * sched.n, &mut stream(seed, &[OUTER, t, j]));
        }
        g /= sched.m as f64;
        trace.step(theta - g * sched.lr_train, oracle);
    }
    Ok(trace.finish())
}

/// One-step MAML stochastic gradient for one task:
/// `(I − (α/D)Σ_d h_d) · (1/N)Σ_i g(θ − α·(1/N)Σ g(θ), ξ_i)`.
fn maml_task_grad(
    task: &TaskParams,
    oracle: &OracleSettings,
    theta: &DVector<f64>,
    sched: &SgdSchedule,
    streams: (&mut SimRng, &mut SimRng, &mut SimRng),
) -> DVector<f64> {
    let (inner_rng, outer_rng, hess_rng) = streams;
    let p = theta.len();
    let inner = theta - mean_grad(task, oracle, theta, sched.n, inner_rng) * sched.alpha;
    let outer = mean_grad(task, oracle, &inner, sched.n, outer_rng);
    let d = sched.d_hessian.max(1);
    let mut h_sum = DMatrix::zeros(p, p);
    for _ in 0..d {
        h_sum += hess_with(task, oracle, hess_rng);
    }
    let precond = DMatrix::identity(p, p) - h_sum * (sched.alpha / d as f64);
    precond * outer
}

/// Meta-training on the one-step MAML objective.
pub fn maml_meta_sgd(
    dist: &FiniteDistribution,
    oracle: &OracleSettings,
    sched: &SgdSchedule,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<SgdTrace> {
    sched.validate()?;
    check_start(dist, theta0, oracle)?;
    let mu = dist.tasks().iter().map(|t| linalg::max_eigenvalue(&t.q)).fold(0.0, f64::max);
    if mu > 0.0 && sched.alpha > 1.0 / (6.0 * mu) + 1e-12 {
        return Err(Error::AssumptionViolation(format!(
            "alpha = {} exceeds 1/(6 mu) = {}",
            sched.alpha,
            1.0 / (6.0 * mu)
        )));
    }
    if (sched.d_hessian as f64) < 2.0 * sched.alpha * sched.alpha * oracle.hess_var {
        return Err(Error::AssumptionViolation(format!(
            "d_hessian = {} is below 2 alpha^2 V^h",
            sched.d_hessian
        )));
    }
    let mut trace = SgdTrace::new(theta0);
    for t in 0..sched.t_train as u64 {
        let theta = trace.last().clone();
        trace
            .grad_norm_sq_train
            .push(maml_population_risk_grad(&theta, sched.alpha, dist)?.norm_squared());
        let mut g = DVector::zeros(theta.len());
        for j in 0..sched.m as u64 {
            let task = &dist.tasks()[dist.sample_index(&mut stream(seed, &[TASK, t, j]))];
            g += maml_task_grad(
                task,
                oracle,
                &theta,
                sched,
                (
                    &mut stream(seed, &[INNER, t, j]),
                    &mut stream(seed, &[OUTER, t, j]),
                    &mut stream(seed, &[HESS, t, j]),
                ),
            );
        }
        g /= sched.m as f64;
        trace.step(theta - g * sched.lr_train, oracle);
    }
    Ok(trace.finish())
}

/// Meta-testing: `T_te` SGD steps on one task from a warm start, each
/// averaging `N` gradient calls.
pub fn meta_test_sgd(
    task: &OracleTask,
    theta_init: &DVector<f64>,
    sched: &SgdSchedule,
    seed: u64,
) -> Result<SgdTrace> {
    sched.validate()?;
    task.oracle.validate()?;
    crate::error::check_dim(task.task.dim(), theta_init.len())?;
    let mut trace = SgdTrace::new(theta_init);
    for t in 0..sched.t_test as u64 {
        let theta = trace.last().clone();
        trace
            .grad_norm_sq_test
            .push((&task.task.q * (&theta - &task.task.theta)).norm_squared());
        let g = mean_grad(&task.task, &task.oracle, &theta, sched.n, &mut stream(seed, &[TEST, t]));
        trace.step(theta - g * sched.lr_test, &task.oracle);
    }
    Ok(trace.finish())
}

/// Monte Carlo estimate of the bias `E[g_j] − ∇R^maml(θ; α)` of the MAML
/// stochastic gradient. Returns `(‖bias‖, standard error)` where the
/// standard error is `√(tr Cov(g_j) / samples)`.
pub fn maml_gradient_bias(
    dist: &FiniteDistribution,
    oracle: &OracleSettings,
    sched: &SgdSchedule,
    theta: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    sched.validate()?;
    check_start(dist, theta, oracle)?;
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let p = theta.len();
    let mut sum = DVector::zeros(p);
    let mut sum_sq = 0.0;
    for s in 0..samples as u64 {
        let task = &dist.tasks()[dist.sample_index(&mut stream(seed, &[TASK, s]))];
        let g = maml_task_grad(
            task,
            oracle,
            theta,
            sched,
            (
                &mut stream(seed, &[INNER, s]),
                &mut stream(seed, &[OUTER, s]),
                &mut stream(seed, &[HESS, s]),
            ),
        );
        sum_sq += g.norm_squared();
        sum += g;
    }
    let k = samples as f64;
    let mean = sum / k;
    let trace_cov = (sum_sq / k - mean.norm_squared()) * k / (k - 1.0);
    let bias = (mean - maml_population_risk_grad(theta, sched.alpha, dist)?).norm();
    Ok((bias, (trace_cov.max(0.0) / k).sqrt()))
}

/// Constants of the bounds, computed for a finite distribution and oracle
/// settings on the ball of radius `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DomainConstants {
    pub smoothness: SmoothnessConstants,
    pub lambda_drs: f64,
    pub lambda_maml: f64,
}

/// Exact or upper-bound values of the regularity constants on `‖θ‖ ≤ R`:
/// μ = max λ_max(Q_γ); L = max ‖Q_γ‖(R + ‖θ_γ‖) bounds ‖∇R(θ; γ)‖;
/// Δ = max ½‖Q_γ‖(R + ‖θ_γ‖)² + ½σ_γ² bounds the risks; Vᵗ bounds
/// `E‖∇R(θ; γ) − ∇R^drs(θ)‖²`; μᴴ = 0 since Hessians are constant.
pub fn domain_constants(dist: &FiniteDistribution, oracle: &OracleSettings, alpha: f64) -> Result<DomainConstants> {
    oracle.validate()?;
    let r = oracle.domain_radius;
    let mut mu = 0.0_f64;
    let mut lip = 0.0_f64;
    let mut delta = 0.0_f64;
    for t in dist.tasks() {
        let qn = t.q_norm();
        let reach = r + t.theta.norm();
        mu = mu.max(linalg::max_eigenvalue(&t.q));
        lip = lip.max(qn * reach);
        delta = delta.max(0.5 * qn * reach * reach + 0.5 * t.noise_var);
    }
    // ∇R(θ;γ) − ∇R^drs(θ) = D_γθ − e_γ with D_γ = Q_γ − E[Q], e_γ = Q_γθ_γ − E[Qθ].
    let eq = dist.expect_q();
    let eqt = dist.expect_vector(|t| &t.q * &t.theta);
    let dd = dist.expect_matrix(|t| {
        let d = &t.q - &eq;
        &d * &d
    });
    let de = dist.expect_vector(|t| (&t.q - &eq) * (&t.q * &t.theta - &eqt));
    let ee = dist.expect_scalar(|t| (&t.q * &t.theta - &eqt).norm_squared());
    let v_task = linalg::max_eigenvalue(&dd).max(0.0) * r * r + 2.0 * r * de.norm() + ee;

    let drs_opt = population_drs_solve(dist)?.x;
    let maml_opt = population_maml_solve(dist, alpha)?.x;
    Ok(DomainConstants {
        smoothness: SmoothnessConstants {
            delta,
            lipschitz_l: lip,
            smooth_mu: mu,
            hessian_lip: 0.0,
            grad_var_data: oracle.grad_var_data,
            grad_var_task: v_task,
            hess_var: oracle.hess_var,
        },
        lambda_drs: drs_population_risk(&drs_opt, dist)?,
        lambda_maml: maml_population_risk(&maml_opt, alpha, dist)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Drs,
    Maml,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub method: Method,
    pub dist: FiniteDistribution,
    pub oracle: OracleSettings,
    /// Learning rates are replaced by the bound-optimizing equal rate when
    /// `optimize_rate` is set.
    pub sched: SgdSchedule,
    pub optimize_rate: bool,
    pub theta0: DVector<f64>,
    pub seeds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub method: Method,
    pub schedule: SgdSchedule,
    pub oracle: OracleSettings,
    pub seeds: usize,
    pub lhs_mean: f64,
    pub lhs_stderr: f64,
    /// Learning-rate-optimized closed form of the theorem.
    pub rhs: f64,
    /// The bound before learning-rate optimization, at the rates used.
    pub rhs_two_rate: f64,
    pub satisfied: bool,
    pub margin: f64,
    pub constants: DomainConstants,
    pub domain_radius: f64,
    pub projections: usize,
    pub diverged_runs: usize,
}

/// Runs meta-training and meta-testing over `seeds` independent seeds and
/// compares the mean left-hand side of the sample-complexity theorem with
/// its right-hand side.
pub fn verify_complexity_bound(config: &VerifyConfig) -> Result<VerifyReport> {
    if config.seeds == 0 {
        return Err(Error::InvalidArgument("seeds must be at least 1".into()));
    }
    let mut sched = config.sched;
    sched.validate()?;
    let constants = domain_constants(&config.dist, &config.oracle, sched.alpha)?;
    let c = constants.smoothness;
    let lambda = match config.method {
        Method::Drs => constants.lambda_drs,
        Method::Maml => constants.lambda_maml,
    };
    if config.optimize_rate {
        let rate = match config.method {
            Method::Drs => bounds::drs_optimal_rate(&c, lambda, &sched),
            Method::Maml => bounds::maml_optimal_rate(&c, lambda, &sched),
        }
        .unwrap_or(1.0 / c.smooth_mu.max(f64::MIN_POSITIVE));
        sched.lr_train = rate;
        sched.lr_test = rate;
    }
    let (rhs, rhs_two_rate) = match config.method {
        Method::Drs => (
            bounds::drs_complexity_bound(&c, lambda, &sched)?,
            bounds::drs_complexity_bound_two_rate(&c, lambda, &sched)?,
        ),
        Method::Maml => (
            bounds::maml_complexity_bound(&c, lambda, &sched)?,
            bounds::maml_complexity_bound_two_rate(&c, lambda, &sched)?,
        ),
    };

    let runs: Vec<Result<SgdTrace>> = (0..config.seeds as u64)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(config.seed, &[k]);
            let train_seed = derive_seed(seed, &[TRAIN]);
            let train = match config.method {
                Method::Drs => drs_meta_sgd(&config.dist, &config.oracle, &sched, &config.theta0, train_seed)?,
                Method::Maml => maml_meta_sgd(&config.dist, &config.oracle, &sched, &config.theta0, train_seed)?,
            };
            let idx = config.dist.sample_index(&mut stream(seed, &[TEST_TASK]));
            let test_task = OracleTask {
                task: config.dist.tasks()[idx].clone(),
                oracle: config.oracle,
            };
            let test = meta_test_sgd(&test_task, train.last(), &sched, derive_seed(seed, &[TEST]))?;
            Ok(SgdTrace {
                theta_path: Vec::new(),
                lhs_sum: train.lhs_sum + test.lhs_sum,
                diverged: train.diverged || test.diverged,
                projections: train.projections + test.projections,
                grad_norm_sq_train: train.grad_norm_sq_train,
                grad_norm_sq_test: test.grad_norm_sq_test,
            })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let k = runs.len() as f64;
    let lhs: Vec<f64> = runs.iter().map(|r| r.lhs_sum).collect();
    let lhs_mean = lhs.iter().sum::<f64>() / k;
    let lhs_stderr = if runs.len() > 1 {
        (lhs.iter().map(|v| (v - lhs_mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(VerifyReport {
        method: config.method,
        schedule: sched,
        oracle: config.oracle,
        seeds: config.seeds,
        lhs_mean,
        lhs_stderr,
        rhs,
        rhs_two_rate,
        satisfied: lhs_mean <= rhs,
        margin: rhs - lhs_mean,
        constants,
        domain_radius: config.oracle.domain_radius,
        projections: runs.iter().map(|r| r.projections).sum(),
        diverged_runs: runs.iter().filter(|r| r.diverged).count(),
    })
}

/// Random small configuration: `p ≤ 3`, 2 to 4 tasks, `M, N ≤ 8`,
/// `T ≤ 200`, α at most `1/(6μ)` and enough Hessian calls.
pub fn random_config(seed: u64, method: Method, seeds: usize) -> Result<VerifyConfig> {
    let mut rng = stream(seed, &[]);
    let p = rng.random_range(1..=3);
    let k = rng.random_range(2..=4);
    let mut tasks = Vec::with_capacity(k);
    for _ in 0..k {
        let v = crate::task_model::rotation_with(p, &mut rng);
        let eig = DVector::from_fn(p, |_, _| rng.random_range(0.2..2.0));
        let q = linalg::symmetrize(&(&v * DMatrix::from_diagonal(&eig) * v.transpose()));
        let theta = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
        tasks.push(TaskParams::new(theta, rng.random_range(0.0..1.0), q)?);
    }
    let dist = FiniteDistribution::uniform(tasks)?;
    let mu = dist.tasks().iter().map(|t| linalg::max_eigenvalue(&t.q)).fold(0.0, f64::max);
    let alpha = match method {
        Method::Drs => 0.0,
        Method::Maml => rng.random_range(0.0..1.0) / (6.0 * mu),
    };
    let hess_var = rng.random_range(0.0..1.0);
    let oracle = OracleSettings {
        grad_var_data: rng.random_range(0.0..2.0),
        hess_var,
        domain_radius: 2.0 * dist.max_theta_norm() + 1.0,
        project: true,
    };
    let sched = SgdSchedule {
        t_train: rng.random_range(0..=200),
        t_test: rng.random_range(0..=200),
        m: rng.random_range(1..=8),
        n: rng.random_range(1..=8),
        d_hessian: ((2.0 * alpha * alpha * hess_var).ceil() as usize).max(1),
        lr_train: 0.0,
        lr_test: 0.0,
        alpha,
    };
    Ok(VerifyConfig {
        method,
        dist,
        oracle,
        sched,
        optimize_rate: true,
        theta0: DVector::zeros(p),
        seeds,
        seed: derive_seed(seed, &[1]),
    })
}
