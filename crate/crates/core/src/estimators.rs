//! Closed-form estimators: stacked MLE, fixed effect, centroid, the
//! centroid-shrinkage estimator and the pairwise ridge-like competitor.
//!
//! With `S(pi) = Σ_j pi_j W_j` the centroid is
//! `theta(pi) = S^{-1} Σ_j pi_j W_j beta_j` and each study estimate is the
//! convex combination `(1 - pi_j) beta_j + pi_j theta(pi)`. The pk×pk
//! operators `A(pi)` and `B(pi) = K A(pi) - I` are kept as their p×p blocks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{HamError, Result};
use crate::linalg::{axpy, Matrix};
use crate::model::{MetaProblem, RayScale, ShrinkageVector};

/// Stacked study MLEs and their block-diagonal covariance `diag(W_j^{-1})`.
pub fn mle_stack(problem: &MetaProblem) -> (Vec<f64>, Matrix) {
    (problem.beta_tilde(), problem.dense_mle_covariance())
}

/// Inverse-variance weighted pooled estimate `(Σ W_j)^{-1} Σ W_j beta_j`.
pub fn fixed_effect(problem: &MetaProblem) -> Result<Vec<f64>> {
    let pi = ShrinkageVector::constant(problem.k(), 1.0)?;
    centroid(problem, &pi).map_err(|e| match e {
        HamError::Singular { .. } => HamError::Singular {
            what: "pooled precision",
        },
        e => e,
    })
}

/// Covariance `(Σ W_j)^{-1}` of the fixed-effect estimate.
pub fn fixed_effect_covariance(problem: &MetaProblem) -> Result<Matrix> {
    let mut s = Matrix::zeros(problem.p(), problem.p());
    for w in problem.precision_blocks() {
        s.add_scaled(1.0, w);
    }
    s.spd_inverse()
}

/// Block form of `A(pi)` and `B(pi)`.
#[derive(Clone, Debug)]
pub struct MixingStructure {
    pi: Vec<f64>,
    p: usize,
    /// `S(pi)^{-1}`.
    pooled_inv: Matrix,
    /// `A_i = S^{-1} pi_i W_i`.
    blocks: Vec<Matrix>,
}

impl MixingStructure {
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// `S(pi)^{-1} = (Σ pi_j W_j)^{-1}`.
    pub fn pooled_inverse(&self) -> &Matrix {
        &self.pooled_inv
    }

    /// The i-th p×p block of `A(pi)`.
    pub fn a_block(&self, i: usize) -> &Matrix {
        &self.blocks[i]
    }

    /// `A(pi) v`, the centroid of a stacked vector.
    pub fn apply_a(&self, v: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; p];
        for (i, a) in self.blocks.iter().enumerate() {
            let y = a.matvec(&v[i * p..(i + 1) * p]);
            axpy(1.0, &y, &mut out);
        }
        out
    }

    /// `B(pi) v = K A(pi) v - v`.
    pub fn apply_b(&self, v: &[f64]) -> Vec<f64> {
        let theta = self.apply_a(v);
        let p = self.p;
        let mut out = v.iter().map(|x| -x).collect::<Vec<_>>();
        for j in 0..self.k() {
            axpy(1.0, &theta, &mut out[j * p..(j + 1) * p]);
        }
        out
    }

    /// Dense p×pk `A(pi)`.
    pub fn dense_a(&self) -> Matrix {
        let mut a = Matrix::zeros(self.p, self.p * self.k());
        for (i, b) in self.blocks.iter().enumerate() {
            a.set_block(0, i * self.p, b);
        }
        a
    }

    /// Dense pk×pk `B(pi)`.
    pub fn dense_b(&self) -> Matrix {
        let (p, k) = (self.p, self.k());
        let mut b = Matrix::zeros(p * k, p * k);
        for j in 0..k {
            for (i, blk) in self.blocks.iter().enumerate() {
                b.set_block(j * p, i * p, blk);
            }
        }
        b.sub(&Matrix::identity(p * k))
    }
}

/// Builds `A(pi)` blockwise. Fails when every `pi_j` is zero.
pub fn mixing_matrix(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<MixingStructure> {
    check_len(problem, pi)?;
    if pi.is_zero() {
        return Err(HamError::NoCentroid);
    }
    let p = problem.p();
    let mut s = Matrix::zeros(p, p);
    for (w, &pj) in problem.precision_blocks().iter().zip(pi.as_slice()) {
        if pj > 0.0 {
            s.add_scaled(pj, w);
        }
    }
    let pooled_inv = s.spd_inverse().map_err(|_| HamError::Singular {
        what: "weighted pooled precision",
    })?;
    let blocks = problem
        .precision_blocks()
        .iter()
        .zip(pi.as_slice())
        .map(|(w, &pj)| {
            if pj > 0.0 {
                pooled_inv.matmul(w).scale(pj)
            } else {
                Matrix::zeros(p, p)
            }
        })
        .collect();
    Ok(MixingStructure {
        pi: pi.as_slice().to_vec(),
        p,
        pooled_inv,
        blocks,
    })
}

fn check_len(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<()> {
    if pi.len() != problem.k() {
        return Err(HamError::Dimension {
            what: "shrinkage vector",
            expected: problem.k(),
            found: pi.len(),
        });
    }
    Ok(())
}

/// Centroid `theta(pi) = S(pi)^{-1} Σ pi_j W_j beta_j`.
pub fn centroid(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<Vec<f64>> {
    let mix = mixing_matrix(problem, pi)?;
    Ok(mix.apply_a(&problem.beta_tilde()))
}

/// Output of [`ham_beta`]; `theta` is `None` when `pi = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamBeta {
    pub beta: Vec<f64>,
    pub theta: Option<Vec<f64>>,
}

/// `beta_j(pi) = (1 - pi_j) beta_j + pi_j theta(pi)` for every study.
pub fn ham_beta(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<HamBeta> {
    check_len(problem, pi)?;
    let beta_tilde = problem.beta_tilde();
    if pi.is_zero() {
        return Ok(HamBeta {
            beta: beta_tilde,
            theta: None,
        });
    }
    let theta = centroid(problem, pi)?;
    let p = problem.p();
    let mut beta = beta_tilde;
    for (j, &pj) in pi.as_slice().iter().enumerate() {
        for (b, t) in beta[j * p..(j + 1) * p].iter_mut().zip(&theta) {
            *b = (1.0 - pj) * *b + pj * t;
        }
    }
    Ok(HamBeta {
        beta,
        theta: Some(theta),
    })
}

/// `[I + c Pi_r B(pi_r)] beta`, the ray/scale form of the estimator.
pub fn ham_beta_ray(problem: &MetaProblem, ray: &RayScale) -> Result<Vec<f64>> {
    let mix = mixing_matrix(problem, &ray.ray())?;
    let beta = problem.beta_tilde();
    let b = mix.apply_b(&beta);
    let p = problem.p();
    let mut out = beta;
    for (j, r) in ray.pi_r.iter().enumerate() {
        for l in 0..p {
            out[j * p + l] += ray.c * r * b[j * p + l];
        }
    }
    Ok(out)
}

/// Penalized log-likelihood evaluated from sufficient statistics.
///
/// The data term of study `j` is `-(RSS_j + (b_j - beta_j)' G_j (b_j - beta_j)) / (2 sigma2_j)`
/// with `G_j = X_j'M_jX_j`; an unknown RSS contributes zero. The penalty is
/// `pi_j / (1 - pi_j) * (b_j - theta)' G_j (b_j - theta) / (2 sigma2_j)`.
pub fn objective_value(
    problem: &MetaProblem,
    beta: &[f64],
    theta: &[f64],
    pi: &ShrinkageVector,
) -> Result<f64> {
    check_len(problem, pi)?;
    let p = problem.p();
    if beta.len() != problem.dim() || theta.len() != p {
        return Err(HamError::Dimension {
            what: "objective arguments",
            expected: problem.dim(),
            found: beta.len(),
        });
    }
    if let Some(index) = pi.as_slice().iter().position(|v| *v >= 1.0) {
        return Err(HamError::InfinitePenalty { index });
    }
    let mut total = 0.0;
    for (j, (s, &pj)) in problem.studies().iter().zip(pi.as_slice()).enumerate() {
        let bj = &beta[j * p..(j + 1) * p];
        let d: Vec<f64> = bj.iter().zip(&s.beta_tilde).map(|(a, b)| a - b).collect();
        let e: Vec<f64> = bj.iter().zip(theta).map(|(a, b)| a - b).collect();
        let data = s.rss.unwrap_or(0.0) + s.gram_proj.quad_form(&d);
        let penalty = pj / (1.0 - pj) * s.gram_proj.quad_form(&e);
        total -= (data + penalty) / (2.0 * s.sigma2);
    }
    Ok(total)
}

/// Ridge-like estimate `R(lambda) beta` with `R = {P + 2 lambda (L ⊗ I_p)}^{-1} P`,
/// where `P = X'Σ^{-1}X` and `L = k I - 1 1'`.
#[derive(Clone, Debug)]
pub struct RidgeFit {
    pub lambda: f64,
    pub beta_r: Vec<f64>,
    pub r: Matrix,
}

/// `L ⊗ I_p` for the complete-graph Laplacian `L = k I - 1 1'`.
pub fn pairwise_contrast_gram(k: usize, p: usize) -> Matrix {
    let mut m = Matrix::zeros(k * p, k * p);
    for a in 0..k {
        for b in 0..k {
            let v = if a == b { (k - 1) as f64 } else { -1.0 };
            for l in 0..p {
                m[(a * p + l, b * p + l)] = v;
            }
        }
    }
    m
}

/// `R(lambda)` as a dense pk×pk matrix.
pub fn ridge_operator(problem: &MetaProblem, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(HamError::Invalid(alloc::format!(
            "ridge penalty must be finite and non-negative, got {}",
            lambda
        )));
    }
    let precision = problem.dense_precision();
    if lambda == 0.0 || problem.k() == 1 {
        return Ok(Matrix::identity(problem.dim()));
    }
    let mut system = precision.clone();
    system.add_scaled(2.0 * lambda, &pairwise_contrast_gram(problem.k(), problem.p()));
    let r = system.spd_solve(&precision);
    debug_assert!(r.is_ok(), "ridge system is PD for lambda >= 0");
    r
}

pub fn ridge_fit(problem: &MetaProblem, lambda: f64) -> Result<RidgeFit> {
    let r = ridge_operator(problem, lambda)?;
    let beta_r = r.matvec(&problem.beta_tilde());
    Ok(RidgeFit { lambda, beta_r, r })
}

/// A fitted centroid-shrinkage estimate with its plug-in inference.
#[derive(Clone, Debug)]
pub struct HamFit {
    pub beta_hat: Vec<f64>,
    /// `None` when no study borrows (`pi = 0`).
    pub theta_hat: Option<Vec<f64>>,
    pub pi: ShrinkageVector,
    /// `None` when `pi = 0`.
    pub ray: Option<RayScale>,
    /// `∇_beta E[beta_hat] = I + Pi B(pi)`.
    pub gradient: Matrix,
    pub covariance: Matrix,
    pub study_ids: Vec<alloc::string::String>,
    pub p: usize,
    pub meta: crate::selection::SelectionDiagnostics,
}

impl HamFit {
    pub fn k(&self) -> usize {
        self.study_ids.len()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| crate::num::sqrt(v.max(0.0)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_problem;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn mle_stack_scalar_pair() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let (b, cov) = mle_stack(&prob);
        assert_eq!(b, vec![1.0, 3.0]);
        assert!(close(cov[(0, 0)], 0.5) && close(cov[(1, 1)], 0.25) && cov[(0, 1)] == 0.0);
    }

    #[test]
    fn fixed_effect_scalar_pair() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert!(close(fixed_effect(&prob).unwrap()[0], 7.0 / 3.0));
        let one = scalar_problem(&[3.0], &[0.7]).unwrap();
        assert!(close(fixed_effect(&one).unwrap()[0], 0.7));
    }

    #[test]
    fn mixing_worked_instance() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let mix = mixing_matrix(&prob, &ShrinkageVector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        let a = mix.dense_a();
        assert!(close(a[(0, 0)], 1.0 / 3.0) && close(a[(0, 1)], 2.0 / 3.0));
        let b = mix.dense_b();
        let expect = [[-2.0 / 3.0, 2.0 / 3.0], [1.0 / 3.0, -1.0 / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(close(b[(i, j)], expect[i][j]));
            }
        }
    }

    #[test]
    fn single_active_study_selects_its_mle() {
        let prob = scalar_problem(&[2.0, 4.0, 1.0], &[1.0, 3.0, -2.0]).unwrap();
        let pi = ShrinkageVector::new(vec![0.0, 0.4, 0.0]).unwrap();
        let mix = mixing_matrix(&prob, &pi).unwrap();
        assert!(close(mix.a_block(1)[(0, 0)], 1.0));
        assert_eq!(mix.a_block(0)[(0, 0)], 0.0);
        assert!(close(centroid(&prob, &pi).unwrap()[0], 3.0));
        let b = mix.apply_b(&prob.beta_tilde());
        assert!(close(b[1], 0.0));
    }

    #[test]
    fn zero_pi_has_no_centroid_but_returns_mle() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let z = ShrinkageVector::zeros(2);
        assert_eq!(mixing_matrix(&prob, &z).unwrap_err(), HamError::NoCentroid);
        let h = ham_beta(&prob, &z).unwrap();
        assert_eq!(h.beta, vec![1.0, 3.0]);
        assert!(h.theta.is_none());
    }

    #[test]
    fn ham_beta_worked_instance() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let half = ShrinkageVector::new(vec![0.5, 0.5]).unwrap();
        assert!(close(centroid(&prob, &half).unwrap()[0], 7.0 / 3.0));
        let h = ham_beta(&prob, &half).unwrap();
        assert!(close(h.beta[0], 5.0 / 3.0) && close(h.beta[1], 8.0 / 3.0));
        let full = ham_beta(&prob, &ShrinkageVector::constant(2, 1.0).unwrap()).unwrap();
        assert!(close(full.beta[0], 7.0 / 3.0) && close(full.beta[1], 7.0 / 3.0));
    }

    #[test]
    fn objective_rejects_full_pooling() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        let pi = ShrinkageVector::new(vec![1.0, 0.2]).unwrap();
        assert_eq!(
            objective_value(&prob, &[1.0, 3.0], &[2.0], &pi).unwrap_err(),
            HamError::InfinitePenalty { index: 0 }
        );
    }

    #[test]
    fn contrast_gram_matches_explicit_pairs() {
        for k in 1..=6 {
            let mut explicit = Matrix::zeros(k, k);
            for a in 0..k {
                for b in (a + 1)..k {
                    let mut c = vec![0.0; k];
                    c[a] = 1.0;
                    c[b] = -1.0;
                    for i in 0..k {
                        for j in 0..k {
                            explicit[(i, j)] += c[i] * c[j];
                        }
                    }
                }
            }
            assert!(explicit.sub(&pairwise_contrast_gram(k, 1)).max_abs() < 1e-15);
        }
    }

    #[test]
    fn ridge_limits() {
        let prob = scalar_problem(&[2.0, 4.0, 3.0], &[1.0, 3.0, 2.5]).unwrap();
        let zero = ridge_fit(&prob, 0.0).unwrap();
        assert_eq!(zero.beta_r, prob.beta_tilde());
        let one = scalar_problem(&[2.0], &[1.5]).unwrap();
        assert!(close(ridge_fit(&one, 1e3).unwrap().beta_r[0], 1.5));
        assert!(ridge_fit(&prob, -1.0).is_err());
    }
}
