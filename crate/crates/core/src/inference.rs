//! Plug-in covariance, normal-theory intervals and tests, and a descriptive
//! heterogeneity index.
//!
//! Inference conditions on the selected shrinkage vector. With
//! `beta_hat = G beta_tilde` and `G = I + Pi B`, the (j, m) block of
//! `G V G'` is
//!
//! ```text
//! δ_jm (1 - pi_j)² V_j + pi_j pi_m [(2 - pi_j - pi_m) S^{-1} + T]
//! ```
//!
//! where `T = S^{-1} (Σ pi_l² W_l) S^{-1}` is the covariance of the centroid.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{HamError, Result};
use crate::estimators::{fixed_effect, mixing_matrix, HamFit};
use crate::linalg::Matrix;
use crate::model::{MetaProblem, RayScale, ShrinkageVector};
use crate::num;

/// `I + c Pi_r B(pi_r)`, the Jacobian of `E beta_hat` in `beta`.
pub fn gradient_expectation(problem: &MetaProblem, ray: &RayScale) -> Result<Matrix> {
    gradient_expectation_pi(problem, &ray.recompose())
}

pub fn gradient_expectation_pi(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<Matrix> {
    let dim = problem.dim();
    let mut g = Matrix::identity(dim);
    if pi.is_zero() {
        return Ok(g);
    }
    let p = problem.p();
    let mix = mixing_matrix(problem, pi)?;
    for (j, &pj) in pi.as_slice().iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for i in 0..problem.k() {
            let mut block = mix.a_block(i).scale(pj);
            if i == j {
                block.add_scaled(-pj, &Matrix::identity(p));
            }
            let mut cur = g.block(j * p, i * p, p, p);
            cur.add_scaled(1.0, &block);
            g.set_block(j * p, i * p, &cur);
        }
    }
    Ok(g)
}

/// Plug-in covariance `G V G'` of the estimate along `ray`.
pub fn ham_covariance(problem: &MetaProblem, ray: &RayScale) -> Result<Matrix> {
    ham_covariance_pi(problem, &ray.recompose())
}

pub fn ham_covariance_pi(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<Matrix> {
    if pi.is_zero() {
        return Ok(problem.dense_mle_covariance());
    }
    let p = problem.p();
    let k = problem.k();
    let pis = pi.as_slice();
    let mix = mixing_matrix(problem, pi)?;
    let s_inv = mix.pooled_inverse();
    let mut s2 = Matrix::zeros(p, p);
    for (w, &pj) in problem.precision_blocks().iter().zip(pis) {
        s2.add_scaled(pj * pj, w);
    }
    let t = s_inv.matmul(&s2).matmul(s_inv);
    let mut cov = Matrix::zeros(k * p, k * p);
    for j in 0..k {
        for m in 0..k {
            let (a, b) = (pis[j], pis[m]);
            let mut block = s_inv.scale(a * b * (2.0 - a - b));
            block.add_scaled(a * b, &t);
            if j == m {
                block.add_scaled((1.0 - a) * (1.0 - a), &problem.covariance_blocks()[j]);
            }
            cov.set_block(j * p, m * p, &block);
        }
    }
    Ok(cov.symmetrize())
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * num::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile.
///
/// Acklam's rational approximation followed by one Halley step against
/// `erfc`, which brings the relative error to about machine precision.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = num::sqrt(-2.0 * num::ln(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = num::sqrt(-2.0 * num::ln(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * num::sqrt(2.0 * core::f64::consts::PI) * num::exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    num::erfc(num::abs(z) / core::f64::consts::SQRT_2).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRow {
    pub study_id: String,
    pub covariate: usize,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub null: f64,
    /// `None` when the standard error is zero.
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

/// Per-coordinate `estimate ± z_{1-alpha/2} SE` with Wald tests.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTable {
    pub alpha: f64,
    pub rows: Vec<IntervalRow>,
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HamError::Invalid(alloc::format!(
            "alpha must lie in (0, 1), got {}",
            alpha
        )));
    }
    Ok(normal_quantile(1.0 - alpha / 2.0))
}

/// Intervals and tests for stacked estimates with the given covariance.
pub fn interval_table(
    study_ids: &[String],
    p: usize,
    estimates: &[f64],
    covariance: &Matrix,
    alpha: f64,
    nulls: Option<&[f64]>,
) -> Result<IntervalTable> {
    let z = check_alpha(alpha)?;
    let dim = study_ids.len() * p;
    if estimates.len() != dim || covariance.rows() != dim || covariance.cols() != dim {
        return Err(HamError::Dimension {
            what: "estimates for interval table",
            expected: dim,
            found: estimates.len(),
        });
    }
    if let Some(n) = nulls {
        if n.len() != dim {
            return Err(HamError::Dimension {
                what: "null values",
                expected: dim,
                found: n.len(),
            });
        }
    }
    let mut rows = Vec::with_capacity(dim);
    for (idx, &est) in estimates.iter().enumerate() {
        let se = num::sqrt(covariance[(idx, idx)].max(0.0));
        let null = nulls.map_or(0.0, |n| n[idx]);
        let p_value = if se > 0.0 {
            Some(two_sided_p((est - null) / se))
        } else {
            None
        };
        rows.push(IntervalRow {
            study_id: study_ids[idx / p].clone(),
            covariate: idx % p,
            estimate: est,
            se,
            lower: est - z * se,
            upper: est + z * se,
            null,
            p_value,
            significant: p_value.map(|v| v < alpha),
        });
    }
    Ok(IntervalTable { alpha, rows })
}

/// Intervals at level `1 - alpha`, with tests against zero.
pub fn confidence_intervals(fit: &HamFit, alpha: f64) -> Result<IntervalTable> {
    interval_table(&fit.study_ids, fit.p, &fit.beta_hat, &fit.covariance, alpha, None)
}

/// Wald tests of each coordinate against `null_values`.
pub fn wald_tests(fit: &HamFit, null_values: &[f64], alpha: f64) -> Result<IntervalTable> {
    interval_table(&fit.study_ids, fit.p, &fit.beta_hat, &fit.covariance, alpha, Some(null_values))
}

/// Cochran's Q over all stacked coordinates against the fixed-effect
/// centroid, with `p (k - 1)` degrees of freedom.
pub fn cochran_q(problem: &MetaProblem) -> Result<(f64, f64)> {
    if problem.k() < 2 {
        return Err(HamError::TooFewStudies {
            needed: 2,
            found: problem.k(),
        });
    }
    let theta = fixed_effect(problem)?;
    let p = problem.p();
    let beta = problem.beta_tilde();
    let mut q = 0.0;
    for (j, w) in problem.precision_blocks().iter().enumerate() {
        let d: Vec<f64> = beta[j * p..(j + 1) * p].iter().zip(&theta).map(|(a, b)| a - b).collect();
        q += w.quad_form(&d);
    }
    Ok((q, (p * (problem.k() - 1)) as f64))
}

/// Descriptive `max(0, (Q - df) / Q)`.
pub fn i_squared(problem: &MetaProblem) -> Result<f64> {
    let (q, df) = cochran_q(problem)?;
    if q <= 0.0 {
        return Ok(0.0);
    }
    Ok(((q - df) / q).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_problem;
    use alloc::vec;

    #[test]
    fn quantile_reference_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-13);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(1e-10) + 6.361340902404056).abs() < 1e-9);
        assert!((normal_quantile(0.01) + 2.326347874040841).abs() < 1e-12);
        for p in [1e-6, 0.01, 0.2, 0.5, 0.8, 0.99, 1.0 - 1e-6] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-15 + 1e-13 * p);
        }
    }

    #[test]
    fn p_value_round_trip() {
        assert!((two_sided_p(0.0) - 1.0).abs() < 1e-15);
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn closed_form_covariance_matches_dense() {
        let prob = scalar_problem(&[2.0, 4.0, 1.0], &[1.0, 3.0, -1.0]).unwrap();
        let pi = ShrinkageVector::new(vec![0.3, 0.9, 0.6]).unwrap();
        let g = gradient_expectation_pi(&prob, &pi).unwrap();
        let v = prob.dense_mle_covariance();
        let dense = g.matmul(&v).matmul(&g.transpose());
        let closed = ham_covariance_pi(&prob, &pi).unwrap();
        assert!(dense.sub(&closed).max_abs() < 1e-13);
    }

    #[test]
    fn zero_shrinkage_gives_mle() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let pi = ShrinkageVector::zeros(2);
        assert_eq!(gradient_expectation_pi(&prob, &pi).unwrap(), Matrix::identity(2));
        assert_eq!(ham_covariance_pi(&prob, &pi).unwrap(), prob.dense_mle_covariance());
    }

    #[test]
    fn interval_example() {
        let ids = vec![String::from("a")];
        let t = interval_table(&ids, 1, &[0.0], &Matrix::identity(1), 0.05, None).unwrap();
        assert!((t.rows[0].upper - 1.959963984540054).abs() < 1e-12);
        assert!((t.rows[0].lower + 1.959963984540054).abs() < 1e-12);
        assert_eq!(t.rows[0].p_value, Some(1.0));
        assert!(interval_table(&ids, 1, &[0.0], &Matrix::identity(1), 1.0, None).is_err());
        let zero = interval_table(&ids, 1, &[0.0], &Matrix::zeros(1, 1), 0.05, None).unwrap();
        assert_eq!(zero.rows[0].p_value, None);
    }

    #[test]
    fn i_squared_cases() {
        let far = scalar_problem(&[100.0, 100.0], &[0.0, 5.0]).unwrap();
        assert!(i_squared(&far).unwrap() > 0.9);
        let same = scalar_problem(&[100.0, 100.0], &[1.0, 1.0]).unwrap();
        assert_eq!(i_squared(&same).unwrap(), 0.0);
        assert!(i_squared(&scalar_problem(&[1.0], &[0.0]).unwrap()).is_err());
    }
}
