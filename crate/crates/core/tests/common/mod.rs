#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use metalinreg::rng::{stream, SimRng};
use metalinreg::{FiniteDistribution, TaskParams};

pub fn random_psd(p: usize, rng: &mut SimRng, lo: f64, hi: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = g.qr().q();
    let eig = DVector::from_fn(p, |_, _| rng.random_range(lo..hi));
    let q = &v * DMatrix::from_diagonal(&eig) * v.transpose();
    (&q + q.transpose()) * 0.5
}

pub fn random_task(p: usize, rng: &mut SimRng) -> TaskParams {
    let theta = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
    TaskParams::new(theta, rng.random_range(0.0..1.0), random_psd(p, rng, 0.1, 2.0)).unwrap()
}

/// Random weights that sum to one exactly.
pub fn random_finite(p: usize, k: usize, rng: &mut SimRng) -> FiniteDistribution {
    let tasks = (0..k).map(|_| random_task(p, rng)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    FiniteDistribution::new(tasks, weights).unwrap()
}

/// Seed-driven distribution strategy: dimension 1..=3, 1..=5 tasks.
pub fn finite_dist() -> impl Strategy<Value = FiniteDistribution> {
    (1usize..=3, 1usize..=5, any::<u64>()).prop_map(|(p, k, seed)| random_finite(p, k, &mut stream(seed, &[])))
}

pub fn vector(p: usize, rng: &mut SimRng, scale: f64) -> DVector<f64> {
    DVector::from_fn(p, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Largest task spectral norm.
pub fn beta_of(d: &FiniteDistribution) -> f64 {
    d.tasks()
        .iter()
        .map(|t| t.q.clone().symmetric_eigenvalues().abs().max())
        .fold(0.0, f64::max)
}

pub fn central_difference(f: impl Fn(&DVector<f64>) -> f64, theta: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// Plain gradient descent with step `1/L`, used as an optimizer oracle.
pub fn gradient_descent(grad: impl Fn(&DVector<f64>) -> DVector<f64>, start: DVector<f64>, lip: f64, iters: usize) -> DVector<f64> {
    let mut x = start;
    for _ in 0..iters {
        let g = grad(&x);
        if g.norm() < 1e-14 {
            break;
        }
        x -= g / lip;
    }
    x
}

/// Sample mean and standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
