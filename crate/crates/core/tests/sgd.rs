mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::{central_difference, mean_se, random_finite, vector};
use metalinreg::bounds::SgdSchedule;
use metalinreg::linalg::max_eigenvalue;
use metalinreg::risk::{drs_population_risk, maml_population_risk};
use metalinreg::rng::{derive_seed, stream};
use metalinreg::sgd_sim::{
    domain_constants, drs_meta_sgd, grad_oracle, hess_oracle, maml_meta_sgd, meta_test_sgd, verify_complexity_bound,
    Method, OracleSettings, OracleTask, VerifyConfig,
};
use metalinreg::FiniteDistribution;

fn mu_of(dist: &FiniteDistribution) -> f64 {
    dist.tasks().iter().map(|t| max_eigenvalue(&t.q)).fold(0.0, f64::max)
}

fn sched(t_train: usize, t_test: usize, lr: f64, alpha: f64) -> SgdSchedule {
    SgdSchedule {
        t_train,
        t_test,
        m: 3,
        n: 4,
        d_hessian: 2,
        lr_train: lr,
        lr_test: lr,
        alpha,
    }
}

#[test]
fn gradient_oracle_is_unbiased_with_capped_variance() {
    let mut rng = stream(1, &[]);
    let task = common::random_task(3, &mut rng);
    let oracle = OracleSettings { grad_var_data: 1.5, hess_var: 0.0, domain_radius: 10.0, project: true };
    let ot = OracleTask { task: task.clone(), oracle };
    let theta = vector(3, &mut rng, 1.0);
    let exact = &task.q * (&theta - &task.theta);
    let draws: Vec<DVector<f64>> = (0..100_000u64).map(|s| grad_oracle(&ot, &theta, s)).collect();
    let mut trace = 0.0;
    for i in 0..3 {
        let xs: Vec<f64> = draws.iter().map(|g| g[i]).collect();
        let (mean, se) = mean_se(&xs);
        assert!((mean - exact[i]).abs() <= 3.0 * se, "component {i}: {mean} ± {se} vs {}", exact[i]);
        trace += se * se * xs.len() as f64;
    }
    assert!(trace <= 1.05 * oracle.grad_var_data, "trace {trace}");
}

#[test]
fn hessian_oracle_is_unbiased() {
    let mut rng = stream(2, &[]);
    let task = common::random_task(2, &mut rng);
    let oracle = OracleSettings { grad_var_data: 0.0, hess_var: 2.0, domain_radius: 10.0, project: true };
    let ot = OracleTask { task: task.clone(), oracle };
    let theta = DVector::zeros(2);
    let draws: Vec<DMatrix<f64>> = (0..100_000u64).map(|s| hess_oracle(&ot, &theta, s)).collect();
    let mut second_moment = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let xs: Vec<f64> = draws.iter().map(|h| h[(i, j)]).collect();
            let (mean, se) = mean_se(&xs);
            assert!((mean - task.q[(i, j)]).abs() <= 3.0 * se, "entry ({i},{j})");
        }
    }
    for h in &draws {
        second_moment += (h - &task.q).norm_squared();
    }
    let per_call = second_moment / draws.len() as f64;
    assert!(per_call <= 1.05 * oracle.hess_var, "E|noise|^2 = {per_call}");
}

#[test]
fn longer_meta_training_gives_a_better_warm_start() {
    let dist = random_finite(2, 3, &mut stream(3, &[]));
    let oracle = OracleSettings { grad_var_data: 1.0, hess_var: 0.0, domain_radius: 12.0, project: true };
    let mu = mu_of(&dist);
    let theta0 = DVector::from_vec(vec![5.0, -5.0]);
    let test_sum = |t_train: usize| {
        let s = sched(t_train, 20, 0.05 / mu, 0.0);
        let sums: Vec<f64> = (0..100u64)
            .map(|k| {
                let train = drs_meta_sgd(&dist, &oracle, &s, &theta0, derive_seed(k, &[0])).unwrap();
                let idx = k as usize % dist.len();
                let task = OracleTask { task: dist.tasks()[idx].clone(), oracle };
                meta_test_sgd(&task, train.last(), &s, derive_seed(k, &[1])).unwrap().lhs_sum
            })
            .collect();
        mean_se(&sums).0
    };
    let (a, b, c) = (test_sum(0), test_sum(50), test_sum(200));
    assert!(a > b && b > c, "{a} {b} {c}");
}

#[test]
fn small_steps_never_diverge() {
    for k in 0..100u64 {
        let mut rng = stream(4, &[k]);
        let p = rng.random_range(1..=3);
        let dist = random_finite(p, rng.random_range(1..=4), &mut rng);
        let oracle = OracleSettings {
            grad_var_data: rng.random_range(0.0..2.0),
            hess_var: rng.random_range(0.0..2.0),
            domain_radius: 2.0 * dist.max_theta_norm() + 1.0,
            project: false,
        };
        let mu = mu_of(&dist);
        let theta0 = vector(p, &mut rng, 1.0);
        let drs = drs_meta_sgd(&dist, &oracle, &sched(100, 0, 1.0 / mu, 0.0), &theta0, k).unwrap();
        assert!(!drs.diverged, "drs config {k}");

        let alpha = rng.random_range(0.0..1.0) / (6.0 * mu);
        let c = domain_constants(&dist, &oracle, alpha).unwrap().smoothness;
        let mu_prime = 4.0 * c.smooth_mu + 2.0 * c.hessian_lip * alpha * c.lipschitz_l;
        let mut s = sched(100, 0, 1.0 / mu_prime, alpha);
        s.d_hessian = (2.0 * alpha * alpha * oracle.hess_var).ceil().max(1.0) as usize;
        let maml = maml_meta_sgd(&dist, &oracle, &s, &theta0, k).unwrap();
        assert!(!maml.diverged, "maml config {k}");
    }
}

#[test]
fn recorded_gradient_norms_match_finite_differences() {
    let dist = random_finite(3, 3, &mut stream(5, &[]));
    let oracle = OracleSettings { grad_var_data: 0.5, hess_var: 0.5, domain_radius: 10.0, project: true };
    let mu = mu_of(&dist);
    let alpha = 0.1 / mu;
    let s = sched(30, 0, 0.3 / mu, alpha);
    let theta0 = DVector::from_element(3, 2.0);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);

    let drs = drs_meta_sgd(&dist, &oracle, &s, &theta0, 6).unwrap();
    for (theta, &recorded) in drs.theta_path.iter().zip(&drs.grad_norm_sq_train) {
        let fd = central_difference(|t| drs_population_risk(t, &dist).unwrap(), theta, 1e-5).norm_squared();
        assert!(rel(fd, recorded) < 1e-6, "{fd} vs {recorded}");
    }
    let maml = maml_meta_sgd(&dist, &oracle, &s, &theta0, 6).unwrap();
    for (theta, &recorded) in maml.theta_path.iter().zip(&maml.grad_norm_sq_train) {
        let fd = central_difference(|t| maml_population_risk(t, alpha, &dist).unwrap(), theta, 1e-5).norm_squared();
        assert!(rel(fd, recorded) < 1e-6, "{fd} vs {recorded}");
    }
    let task = OracleTask { task: dist.tasks()[1].clone(), oracle };
    let test = meta_test_sgd(&task, &theta0, &sched(0, 30, 0.3 / mu, 0.0), 7).unwrap();
    for (theta, &recorded) in test.theta_path.iter().zip(&test.grad_norm_sq_test) {
        let fd = central_difference(|t| metalinreg::risk::task_risk(t, &task.task).unwrap(), theta, 1e-5).norm_squared();
        assert!(rel(fd, recorded) < 1e-6, "{fd} vs {recorded}");
    }
}

fn verify(dist: &FiniteDistribution, oracle: OracleSettings, s: SgdSchedule, theta0: DVector<f64>, seeds: usize) -> metalinreg::sgd_sim::VerifyReport {
    verify_complexity_bound(&VerifyConfig {
        method: Method::Drs,
        dist: dist.clone(),
        oracle,
        sched: s,
        optimize_rate: true,
        theta0,
        seeds,
        seed: 8,
    })
    .unwrap()
}

#[test]
fn warm_start_at_optimum_has_zero_left_side() {
    let mut task = common::random_task(2, &mut stream(9, &[]));
    task.noise_var = 0.0;
    let theta = task.theta.clone();
    let dist = FiniteDistribution::single(task).unwrap();
    let oracle = OracleSettings { grad_var_data: 0.0, hess_var: 0.0, domain_radius: 5.0, project: true };
    let report = verify(&dist, oracle, sched(0, 40, 0.1, 0.0), theta, 5);
    assert_eq!(report.lhs_mean, 0.0);
    assert!(report.rhs >= 0.0 && report.satisfied);
}

#[test]
fn right_side_grows_with_gradient_noise() {
    let dist = random_finite(2, 3, &mut stream(10, &[]));
    let theta0 = DVector::zeros(2);
    let mut prev = 0.0;
    for vd in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let oracle = OracleSettings { grad_var_data: vd, hess_var: 0.0, domain_radius: 6.0, project: true };
        let rhs = verify(&dist, oracle, sched(20, 20, 0.1, 0.0), theta0.clone(), 2).rhs;
        assert!(rhs > prev, "V^d = {vd}: {rhs} <= {prev}");
        prev = rhs;
    }
}

#[test]
fn noiseless_single_task_maml_converges() {
    let dist = random_finite(2, 1, &mut stream(11, &[]));
    let oracle = OracleSettings { grad_var_data: 0.0, hess_var: 0.0, domain_radius: 10.0, project: true };
    let mu = mu_of(&dist);
    let s = sched(2_000, 0, 0.5 / mu, 1.0 / (6.0 * mu));
    let trace = maml_meta_sgd(&dist, &oracle, &s, &DVector::zeros(2), 0).unwrap();
    let exact = metalinreg::risk::maml_population_risk_grad(trace.last(), s.alpha, &dist).unwrap();
    assert!(exact.norm_squared() < 1e-8);
}
