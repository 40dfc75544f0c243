//! Mean squared error of the shrinkage estimator and its data-driven
//! surrogates.
//!
//! Every functional here is assembled from the five numbers in [`RiskTerms`].
//! With `V_j = W_j^{-1}`, `S = Σ pi_j W_j` and `T = S^{-1} (Σ pi_j² W_j) S^{-1}`
//! the diagonal blocks of `Pi B V` and `Pi B V B' Pi` reduce to
//!
//! ```text
//! tr_cov = Σ_j pi_j (pi_j tr S^{-1} - tr V_j)
//! tr_var = Σ_j pi_j² (tr T - 2 pi_j tr S^{-1} + tr V_j)
//! ```
//!
//! so nothing pk-dimensional is ever formed.

use alloc::vec::Vec;

use crate::error::{HamError, Result};
use crate::linalg::{norm2, Matrix};
use crate::model::{MetaProblem, RayScale, ShrinkageVector};

/// Trace and norm terms of the MSE decomposition at one shrinkage vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskTerms {
    /// `tr Cov[beta, Pi B beta]`.
    pub tr_cov: f64,
    /// `tr Var[Pi B beta]`.
    pub tr_var: f64,
    /// `||Pi B beta_tilde||²`.
    pub bias_norm2_hat: f64,
    /// `||Pi B beta||²` at the supplied true coefficients.
    pub bias_norm2_true: Option<f64>,
    /// `tr (X'Σ^{-1}X)^{-1}`.
    pub tr_var_mle: f64,
}

pub fn risk_terms(
    problem: &MetaProblem,
    pi: &ShrinkageVector,
    beta_true: Option<&[f64]>,
) -> Result<RiskTerms> {
    if pi.len() != problem.k() {
        return Err(HamError::Dimension {
            what: "shrinkage vector",
            expected: problem.k(),
            found: pi.len(),
        });
    }
    if let Some(b) = beta_true {
        if b.len() != problem.dim() {
            return Err(HamError::Dimension {
                what: "true coefficients",
                expected: problem.dim(),
                found: b.len(),
            });
        }
    }
    let tr_var_mle = problem.trace_mle_covariance();
    if pi.is_zero() {
        return Ok(RiskTerms {
            tr_cov: 0.0,
            tr_var: 0.0,
            bias_norm2_hat: 0.0,
            bias_norm2_true: beta_true.map(|_| 0.0),
            tr_var_mle,
        });
    }
    let p = problem.p();
    let pis = pi.as_slice();
    let mut s = Matrix::zeros(p, p);
    let mut s2 = Matrix::zeros(p, p);
    let mut rhs_hat = alloc::vec![0.0; p];
    let mut rhs_true = alloc::vec![0.0; p];
    let beta_hat = problem.beta_tilde();
    for (j, (w, &pj)) in problem.precision_blocks().iter().zip(pis).enumerate() {
        if pj == 0.0 {
            continue;
        }
        s.add_scaled(pj, w);
        s2.add_scaled(pj * pj, w);
        let wb = w.matvec(&beta_hat[j * p..(j + 1) * p]);
        crate::linalg::axpy(pj, &wb, &mut rhs_hat);
        if let Some(b) = beta_true {
            let wb = w.matvec(&b[j * p..(j + 1) * p]);
            crate::linalg::axpy(pj, &wb, &mut rhs_true);
        }
    }
    let chol = s.cholesky().or_else(|_| {
        Err(HamError::Singular {
            what: "weighted pooled precision",
        })
    });
    let (s_inv, theta_hat, theta_true) = match chol {
        Ok(c) => (c.inverse(), c.solve(&rhs_hat), c.solve(&rhs_true)),
        Err(e) => {
            let lu = s.lu().map_err(|_| e)?;
            (lu.inverse().symmetrize(), lu.solve(&rhs_hat), lu.solve(&rhs_true))
        }
    };
    let tr_s_inv = s_inv.trace();
    let tr_t = s_inv.matmul(&s2).matmul(&s_inv).trace();

    let mut tr_cov = 0.0;
    let mut tr_var = 0.0;
    let mut bias_hat = 0.0;
    let mut bias_true = 0.0;
    for (j, (v, &pj)) in problem.covariance_blocks().iter().zip(pis).enumerate() {
        if pj == 0.0 {
            continue;
        }
        let tr_v = v.trace();
        tr_cov += pj * (pj * tr_s_inv - tr_v);
        tr_var += pj * pj * (tr_t - 2.0 * pj * tr_s_inv + tr_v);
        let range = j * p..(j + 1) * p;
        bias_hat += pj * pj * dist2(&theta_hat, &beta_hat[range.clone()]);
        if let Some(b) = beta_true {
            bias_true += pj * pj * dist2(&theta_true, &b[range]);
        }
    }
    Ok(RiskTerms {
        tr_cov,
        tr_var: tr_var.max(0.0),
        bias_norm2_hat: bias_hat,
        bias_norm2_true: beta_true.map(|_| bias_true),
        tr_var_mle,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl RiskTerms {
    pub fn true_mse(&self) -> Result<f64> {
        let b = self.bias_norm2_true.ok_or(HamError::MissingTruth)?;
        Ok(b + self.tr_var + 2.0 * self.tr_cov + self.tr_var_mle)
    }

    pub fn bmse(&self) -> f64 {
        self.bias_norm2_hat + self.tr_var + 2.0 * self.tr_cov + self.tr_var_mle
    }

    pub fn umse(&self) -> f64 {
        self.bias_norm2_hat + 2.0 * self.tr_cov + self.tr_var_mle
    }

    pub fn pseudo_mse(&self, sign: PseudoSign) -> f64 {
        let b = self.bias_norm2_hat;
        let denom = self.tr_var + b;
        if !(denom > 0.0) {
            return 0.0;
        }
        let s = match sign {
            PseudoSign::Corrected => 1.0,
            PseudoSign::Flipped => -1.0,
        };
        b + s * 2.0 * b * self.tr_cov / denom
    }
}

/// Sign of the correction term in the pseudo-MSE.
///
/// `Corrected` integrates the shifted UMSE derivative and has its minimizer
/// along each ray at the BMSE root `-tr_cov / (tr_var + bias)`. `Flipped` is
/// kept for sensitivity runs only; since `tr_cov < 0` it pushes selection
/// toward `pi = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PseudoSign {
    #[default]
    Corrected,
    Flipped,
}

/// `E ||beta(pi) - beta||²` at known coefficients.
pub fn true_mse(problem: &MetaProblem, pi: &ShrinkageVector, beta_true: &[f64]) -> Result<f64> {
    risk_terms(problem, pi, Some(beta_true))?.true_mse()
}

/// `MSE(c) = a c² + b c + constant` along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticMse {
    pub a: f64,
    pub b: f64,
    pub constant: f64,
}

impl QuadraticMse {
    pub fn eval(&self, c: f64) -> f64 {
        (self.a * c + self.b) * c + self.constant
    }

    /// Unconstrained minimizer `-b / (2a)`.
    pub fn vertex(&self) -> f64 {
        -self.b / (2.0 * self.a)
    }
}

pub fn mse_in_c(problem: &MetaProblem, ray: &RayScale, beta_true: &[f64]) -> Result<QuadraticMse> {
    let t = risk_terms(problem, &ray.ray(), Some(beta_true))?;
    Ok(QuadraticMse {
        a: t.tr_var + t.bias_norm2_true.unwrap_or(0.0),
        b: 2.0 * t.tr_cov,
        constant: t.tr_var_mle,
    })
}

/// A scalar clamped to `[0, 1]` together with its unclamped value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub unclamped: f64,
}

impl Clamped {
    fn new(unclamped: f64) -> Self {
        Self {
            value: unclamped.clamp(0.0, 1.0),
            unclamped,
        }
    }
}

/// MSE-optimal scale along a ray, `min(-tr_cov / (tr_var + bias), 1)`.
pub fn c_star(problem: &MetaProblem, ray: &ShrinkageVector, beta_true: &[f64]) -> Result<Clamped> {
    let rs = ray.decompose()?;
    if rs.is_degenerate() {
        return Err(HamError::DegenerateRay);
    }
    let q = mse_in_c(problem, &rs, beta_true)?;
    Ok(Clamped::new(q.vertex()))
}

/// MSE-optimal common weight when every `pi_j` is equal.
pub fn pi_star_equal(problem: &MetaProblem, beta_true: &[f64]) -> Result<Clamped> {
    if problem.k() < 2 {
        return Err(HamError::TooFewStudies {
            needed: 2,
            found: problem.k(),
        });
    }
    let ones = ShrinkageVector::constant(problem.k(), 1.0)?;
    let t = risk_terms(problem, &ones, Some(beta_true))?;
    let denom = t.tr_var + t.bias_norm2_true.unwrap_or(0.0);
    Ok(Clamped::new(-t.tr_cov / denom))
}

/// `pi = c * pi_r` with `c = max pi_j`.
pub fn decompose(pi: &ShrinkageVector) -> Result<RayScale> {
    pi.decompose()
}

/// Plug-in MSE with `beta_tilde` in place of the truth; biased upward by `tr_var`.
pub fn bmse(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<f64> {
    Ok(risk_terms(problem, pi, None)?.bmse())
}

/// Unbiased MSE estimate `||Pi B beta_tilde||² + 2 tr_cov + tr_var_mle`.
pub fn umse(problem: &MetaProblem, pi: &ShrinkageVector) -> Result<f64> {
    Ok(risk_terms(problem, pi, None)?.umse())
}

/// Selection objective whose minimizer along any ray is the BMSE minimizer.
pub fn pseudo_mse(problem: &MetaProblem, pi: &ShrinkageVector, sign: PseudoSign) -> Result<f64> {
    Ok(risk_terms(problem, pi, None)?.pseudo_mse(sign))
}

/// BMSE-minimizing scale along a ray, before clamping.
pub fn c_tilde(problem: &MetaProblem, ray: &ShrinkageVector) -> Result<f64> {
    let t = risk_terms(problem, ray, None)?;
    Ok(-t.tr_cov / (t.tr_var + t.bias_norm2_hat))
}

/// UMSE-minimizing scale along a ray, before clamping.
pub fn c_hat(problem: &MetaProblem, ray: &ShrinkageVector) -> Result<f64> {
    let t = risk_terms(problem, ray, None)?;
    Ok(-t.tr_cov / t.bias_norm2_hat)
}

/// Dense reference for the trace terms; used by tests on small problems.
pub fn dense_risk_terms(
    problem: &MetaProblem,
    pi: &ShrinkageVector,
    beta_true: Option<&[f64]>,
) -> Result<RiskTerms> {
    let v = problem.dense_mle_covariance();
    let dim = problem.dim();
    if pi.is_zero() {
        return risk_terms(problem, pi, beta_true);
    }
    let b = crate::estimators::mixing_matrix(problem, pi)?.dense_b();
    let p = problem.p();
    let mut big_pi = Matrix::zeros(dim, dim);
    for (j, pj) in pi.as_slice().iter().enumerate() {
        for l in 0..p {
            big_pi[(j * p + l, j * p + l)] = *pj;
        }
    }
    let pb = big_pi.matmul(&b);
    let pbv = pb.matmul(&v);
    let tr_cov = pbv.trace();
    let tr_var = pbv.matmul(&pb.transpose()).trace();
    let bias_hat = norm2(&pb.matvec(&problem.beta_tilde()));
    let bias_true = beta_true.map(|bt| norm2(&pb.matvec(bt)));
    Ok(RiskTerms {
        tr_cov,
        tr_var,
        bias_norm2_hat: bias_hat,
        bias_norm2_true: bias_true,
        tr_var_mle: v.trace(),
    })
}

/// Study-wise copies of `theta` stacked into a pk-vector.
pub fn stack_copies(theta: &[f64], k: usize) -> Vec<f64> {
    (0..k).flat_map(|_| theta.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_problem;
    use alloc::vec;

    fn worked() -> MetaProblem {
        scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn zero_pi_terms_vanish() {
        let t = risk_terms(&worked(), &ShrinkageVector::zeros(2), Some(&[1.0, 3.0])).unwrap();
        assert_eq!((t.tr_cov, t.tr_var, t.bias_norm2_hat), (0.0, 0.0, 0.0));
        assert_eq!(t.bias_norm2_true, Some(0.0));
        assert!(close(t.tr_var_mle, 0.75));
        assert!(close(bmse(&worked(), &ShrinkageVector::zeros(2)).unwrap(), 0.75));
        assert!(close(umse(&worked(), &ShrinkageVector::zeros(2)).unwrap(), 0.75));
        assert_eq!(pseudo_mse(&worked(), &ShrinkageVector::zeros(2), PseudoSign::Corrected).unwrap(), 0.0);
    }

    #[test]
    fn worked_instance_terms() {
        let ones = ShrinkageVector::constant(2, 1.0).unwrap();
        let t = risk_terms(&worked(), &ones, Some(&[1.0, 3.0])).unwrap();
        assert!(close(t.tr_cov, -5.0 / 12.0));
        assert!(close(t.tr_var, 5.0 / 12.0));
        assert!(close(t.tr_var_mle, 3.0 / 4.0));
        assert!(close(t.bias_norm2_true.unwrap(), 20.0 / 9.0));
        assert!(close(t.bias_norm2_hat, 20.0 / 9.0));
        // Directly: 2 Var(theta) + bias = 2/6 + 20/9.
        assert!(close(t.true_mse().unwrap(), 23.0 / 9.0));
        let q = mse_in_c(&worked(), &ones.decompose().unwrap(), &[1.0, 3.0]).unwrap();
        assert!(close(q.a, 95.0 / 36.0) && close(q.b, -5.0 / 6.0) && close(q.constant, 0.75));
        assert!(close(c_star(&worked(), &ones, &[1.0, 3.0]).unwrap().value, 3.0 / 19.0));
        assert!(close(pi_star_equal(&worked(), &[1.0, 3.0]).unwrap().value, 3.0 / 19.0));
        let o = pseudo_mse(&worked(), &ones, PseudoSign::Corrected).unwrap();
        assert!(close(o, 260.0 / 171.0));
    }

    #[test]
    fn quadratic_symmetry_about_vertex() {
        let ones = ShrinkageVector::constant(2, 1.0).unwrap();
        let q = mse_in_c(&worked(), &ones.decompose().unwrap(), &[1.0, 3.0]).unwrap();
        let cs = q.vertex();
        assert!((q.eval(2.0 * cs) - q.eval(0.0)).abs() < 1e-14);
    }

    #[test]
    fn homogeneous_truth_has_no_bias() {
        let prob = scalar_problem(&[2.0, 4.0, 1.5], &[1.0, 3.0, 0.0]).unwrap();
        let truth = vec![0.7; 3];
        for pi in [[0.2, 0.9, 0.5], [1.0, 0.0, 0.3], [1.0, 1.0, 1.0]] {
            let t = risk_terms(&prob, &ShrinkageVector::new(pi.to_vec()).unwrap(), Some(&truth)).unwrap();
            assert!(t.bias_norm2_true.unwrap().abs() < 1e-24);
        }
    }

    #[test]
    fn degenerate_ray_signalled() {
        let ray = ShrinkageVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(c_star(&worked(), &ray, &[1.0, 3.0]).unwrap_err(), HamError::DegenerateRay);
        let one = scalar_problem(&[2.0], &[1.0]).unwrap();
        assert!(pi_star_equal(&one, &[1.0]).is_err());
    }

    #[test]
    fn umse_vertex_is_c_hat() {
        let ray = ShrinkageVector::new(vec![1.0, 0.4]).unwrap();
        let ch = c_hat(&worked(), &ray).unwrap();
        let f = |c: f64| {
            let pi = ShrinkageVector::new(ray.as_slice().iter().map(|v| v * c).collect()).unwrap();
            umse(&worked(), &pi).unwrap()
        };
        if (0.01..0.99).contains(&ch) {
            assert!(f(ch) <= f(ch - 1e-4) && f(ch) <= f(ch + 1e-4));
        }
        let t = risk_terms(&worked(), &ray, None).unwrap();
        assert!(close(ch, -t.tr_cov / t.bias_norm2_hat));
    }
}
