//! Result-compilation statistics: Welch's one-sided t-test, pooling of
//! per-seed summaries and a Spearman rank-correlation test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchResult {
    pub t_value: f64,
    pub dof: f64,
    /// `P(T > t)` for `T ~ t_ν`: the one-sided evidence that group a has the
    /// larger mean.
    pub p_greater: f64,
}

fn t_sf(t: f64, dof: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(format!("t distribution with {dof} degrees of freedom: {e}")))?;
    Ok((1.0 - dist.cdf(t)).clamp(0.0, 1.0))
}

/// Welch's unequal-variance t-test from summary statistics. `var_*` are
/// sample variances and `n_*` sample sizes.
pub fn welch_test(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> Result<WelchResult> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::InvalidArgument(format!(
            "each group needs at least 2 samples (got {n_a} and {n_b})"
        )));
    }
    if !(var_a >= 0.0 && var_b >= 0.0) || ![mean_a, mean_b, var_a, var_b].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("means must be finite and variances finite and nonnegative".into()));
    }
    if var_a == 0.0 && var_b == 0.0 {
        return Err(Error::InvalidArgument("both variances are zero; the statistic is undefined".into()));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let sa = var_a / na;
    let sb = var_b / nb;
    let t_value = (mean_a - mean_b) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t_value,
        dof,
        p_greater: t_sf(t_value, dof)?,
    })
}

/// Pools per-seed means and variances with the law of total variance:
/// the mean of the variances plus the (population) variance of the means.
pub fn compile_seed_stats(means: &[f64], vars: &[f64]) -> Result<(f64, f64)> {
    if means.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    if means.len() != vars.len() {
        return Err(Error::DimensionMismatch {
            expected: means.len(),
            found: vars.len(),
        });
    }
    let k = means.len() as f64;
    let mean = means.iter().sum::<f64>() / k;
    let within = vars.iter().sum::<f64>() / k;
    let between = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / k;
    Ok((mean, within + between))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Ties share the average of their 1-based ranks.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// One-sided p-value for a positive association, from the t
    /// approximation with `n − 2` degrees of freedom.
    pub p_positive: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("Spearman test needs at least 3 points".into()));
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let dof = (x.len() - 2) as f64;
    let p_positive = if rho >= 1.0 {
        0.0
    } else if rho <= -1.0 {
        1.0
    } else {
        t_sf(rho * (dof / (1.0 - rho * rho)).sqrt(), dof)?
    };
    Ok(SpearmanResult { rho, p_positive })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_means_give_half() {
        let r = welch_test(1.0, 2.0, 5, 1.0, 3.0, 7).unwrap();
        assert_eq!(r.t_value, 0.0);
        assert_relative_eq!(r.p_greater, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equal_variance_five_each_has_eight_dof() {
        let r = welch_test(0.3, 1.7, 5, -0.2, 1.7, 5).unwrap();
        assert_eq!(r.dof, 8.0);
    }

    #[test]
    fn welch_rejects_degenerate_input() {
        assert!(welch_test(1.0, 0.0, 5, 1.0, 0.0, 5).is_err());
        assert!(welch_test(1.0, 0.0, 5, 2.0, 0.0, 5).is_err());
        assert!(welch_test(1.0, 1.0, 1, 2.0, 1.0, 5).is_err());
        assert!(welch_test(1.0, -1.0, 3, 2.0, 1.0, 5).is_err());
    }

    #[test]
    fn one_zero_variance_is_fine() {
        let r = welch_test(2.0, 0.0, 4, 1.0, 3.0, 4).unwrap();
        // Only group b contributes: ν = n_b − 1.
        assert_relative_eq!(r.dof, 3.0, epsilon = 1e-12);
        assert!(r.p_greater < 0.5);
    }

    #[test]
    fn seed_pooling() {
        assert_eq!(compile_seed_stats(&[3.0], &[0.5]).unwrap(), (3.0, 0.5));
        assert_eq!(compile_seed_stats(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), (1.0, 2.0));
        assert_eq!(compile_seed_stats(&[1.5; 4], &[0.2; 4]).unwrap(), (1.5, 0.2));
        assert!(compile_seed_stats(&[], &[]).is_err());
        assert!(compile_seed_stats(&[1.0], &[]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap();
        assert_eq!(up.rho, 1.0);
        assert_eq!(up.p_positive, 0.0);
        let down = spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(down.rho, -1.0);
        assert_eq!(down.p_positive, 1.0);
    }
}
