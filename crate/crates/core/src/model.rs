//! Study summaries, the validated multi-study problem, and the shrinkage
//! parameterizations shared by every estimator.
//!
//! Summary statistics are the canonical representation. A study contributes
//! its MLE for the shared coefficients, its error variance, and the projected
//! Gram matrix `X'MX` (plain `X'X` when it has no nuisance covariates). Raw
//! data only pass through [`summarize_raw_study`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{HamError, Result};
use crate::linalg::Matrix;
use crate::num;

/// Symmetry tolerance for Gram matrices, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// A Gram matrix is positive definite when its smallest eigenvalue exceeds
/// this multiple of the largest one.
pub const PD_REL_TOL: f64 = 1e-12;

/// Denominator used for the error-variance estimate of a raw study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SigmaConvention {
    /// `RSS / n`, the likelihood MLE.
    #[default]
    Mle,
    /// `RSS / (n - q)`.
    Unbiased,
}

/// Per-study sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySummary {
    pub id: String,
    /// Number of shared covariates.
    pub p: usize,
    /// Total number of covariates, shared plus nuisance.
    pub q: usize,
    pub n: usize,
    pub sigma2: f64,
    /// MLE of the shared-covariate coefficients.
    pub beta_tilde: Vec<f64>,
    /// `X'MX`; equal to `X'X` when `q == p`.
    pub gram_proj: Matrix,
    pub covariate_sds: Option<Vec<f64>>,
    pub intercept_index: Option<usize>,
    /// Residual sum of squares, when known. Only the penalized objective uses it.
    pub rss: Option<f64>,
}

impl StudySummary {
    /// Checks every per-study invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| HamError::InvalidStudy {
            study: self.id.clone(),
            message,
        };
        if self.p == 0 {
            return Err(bad("p must be at least 1".into()));
        }
        if self.q < self.p {
            return Err(bad(format!("q = {} is smaller than p = {}", self.q, self.p)));
        }
        if self.n < self.q + 1 {
            return Err(bad(format!(
                "n = {} must be at least q + 1 = {}",
                self.n,
                self.q + 1
            )));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(bad(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        if self.beta_tilde.len() != self.p {
            return Err(bad(format!(
                "beta_tilde has length {}, expected {}",
                self.beta_tilde.len(),
                self.p
            )));
        }
        if self.beta_tilde.iter().any(|b| !b.is_finite()) {
            return Err(bad("beta_tilde contains a non-finite value".into()));
        }
        if self.gram_proj.rows() != self.p || self.gram_proj.cols() != self.p {
            return Err(bad(format!(
                "gram_proj is {}x{}, expected {}x{}",
                self.gram_proj.rows(),
                self.gram_proj.cols(),
                self.p,
                self.p
            )));
        }
        if !self.gram_proj.is_symmetric(SYMMETRY_TOL) {
            return Err(HamError::NotSymmetric {
                study: self.id.clone(),
                what: "gram_proj",
            });
        }
        let eig = self.gram_proj.symmetric_eigenvalues();
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        if !(lo > PD_REL_TOL * hi) || !(hi > 0.0) {
            return Err(HamError::StudyNotPositiveDefinite {
                study: self.id.clone(),
                what: "gram_proj",
                min_eigenvalue: lo,
            });
        }
        if let Some(sds) = &self.covariate_sds {
            if sds.len() != self.p {
                return Err(bad(format!(
                    "covariate_sds has length {}, expected {}",
                    sds.len(),
                    self.p
                )));
            }
        }
        if let Some(ix) = self.intercept_index {
            if ix >= self.p {
                return Err(bad(format!("intercept_index {} out of range", ix)));
            }
        }
        Ok(())
    }

    /// Precision `W = X'MX / sigma2` of the shared-coefficient MLE.
    pub fn precision(&self) -> Matrix {
        self.gram_proj.scale(1.0 / self.sigma2)
    }
}

/// A validated collection of studies sharing `p` covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaProblem {
    studies: Vec<StudySummary>,
    precision: Vec<Matrix>,
    covariance: Vec<Matrix>,
    p: usize,
}

impl MetaProblem {
    pub fn new(studies: Vec<StudySummary>) -> Result<Self> {
        let first = studies.first().ok_or(HamError::TooFewStudies {
            needed: 1,
            found: 0,
        })?;
        let p = first.p;
        for s in &studies {
            if s.p != p {
                return Err(HamError::InvalidStudy {
                    study: s.id.clone(),
                    message: format!("has p = {} but the first study has p = {}", s.p, p),
                });
            }
            s.validate()?;
        }
        let precision: Vec<Matrix> = studies.iter().map(StudySummary::precision).collect();
        let covariance = studies
            .iter()
            .zip(&precision)
            .map(|(s, w)| {
                w.spd_inverse().map_err(|_| HamError::StudyNotPositiveDefinite {
                    study: s.id.clone(),
                    what: "precision",
                    min_eigenvalue: w.symmetric_eigenvalues()[0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            studies,
            precision,
            covariance,
            p,
        })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.studies.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.p * self.studies.len()
    }

    pub fn studies(&self) -> &[StudySummary] {
        &self.studies
    }

    /// `W_j = X_j'M_jX_j / sigma2_j`.
    pub fn precision_blocks(&self) -> &[Matrix] {
        &self.precision
    }

    /// `W_j^{-1}`, the covariance of study `j`'s MLE.
    pub fn covariance_blocks(&self) -> &[Matrix] {
        &self.covariance
    }

    /// Stacked MLE `(beta_1', ..., beta_k')'`.
    pub fn beta_tilde(&self) -> Vec<f64> {
        self.studies
            .iter()
            .flat_map(|s| s.beta_tilde.iter().copied())
            .collect()
    }

    /// `tr{(X'Σ^{-1}X)^{-1}}`, the MSE of the stacked MLE.
    pub fn trace_mle_covariance(&self) -> f64 {
        self.covariance.iter().map(Matrix::trace).sum()
    }

    /// Same designs with a replacement stacked MLE.
    pub fn with_beta_tilde(&self, beta: &[f64]) -> Result<Self> {
        if beta.len() != self.dim() {
            return Err(HamError::Dimension {
                what: "stacked beta",
                expected: self.dim(),
                found: beta.len(),
            });
        }
        let mut out = self.clone();
        for (j, s) in out.studies.iter_mut().enumerate() {
            s.beta_tilde.copy_from_slice(&beta[j * self.p..(j + 1) * self.p]);
        }
        Ok(out)
    }

    /// Same designs and estimates with replacement error variances.
    pub fn with_sigma2(&self, sigma2: &[f64]) -> Result<Self> {
        if sigma2.len() != self.k() {
            return Err(HamError::Dimension {
                what: "sigma2 vector",
                expected: self.k(),
                found: sigma2.len(),
            });
        }
        let studies = self
            .studies
            .iter()
            .zip(sigma2)
            .map(|(s, v)| StudySummary {
                sigma2: *v,
                ..s.clone()
            })
            .collect();
        Self::new(studies)
    }

    /// Dense `X'Σ^{-1}X` (block diagonal). Intended for small problems and tests.
    pub fn dense_precision(&self) -> Matrix {
        Matrix::block_diag(&self.precision)
    }

    pub fn dense_mle_covariance(&self) -> Matrix {
        Matrix::block_diag(&self.covariance)
    }
}

/// Per-study shrinkage weights `pi_j ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkageVector(Vec<f64>);

impl ShrinkageVector {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        for (index, &value) in pi.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(HamError::ShrinkageOutOfRange { index, value });
            }
        }
        Ok(Self(pi))
    }

    pub fn zeros(k: usize) -> Self {
        Self(alloc::vec![0.0; k])
    }

    pub fn constant(k: usize, value: f64) -> Result<Self> {
        Self::new(alloc::vec![value; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Splits `pi = c * pi_r` with `c = max pi_j` and `max pi_r = 1`.
    pub fn decompose(&self) -> Result<RayScale> {
        let c = self.max();
        if c <= 0.0 {
            return Err(HamError::NoCentroid);
        }
        let mut pi_r: Vec<f64> = self.0.iter().map(|v| v / c).collect();
        // Division can land a hair above 1 for the maximizing entry.
        for v in &mut pi_r {
            *v = v.min(1.0);
        }
        Ok(RayScale { c, pi_r })
    }
}

/// `(c, pi_r)` decomposition of a shrinkage vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RayScale {
    pub c: f64,
    pub pi_r: Vec<f64>,
}

impl RayScale {
    /// Validates `c ∈ [0, 1]`, `pi_r ∈ [0, 1]^k` and `max pi_r = 1`.
    pub fn new(c: f64, pi_r: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(HamError::Invalid(format!("scale c = {} outside [0, 1]", c)));
        }
        ShrinkageVector::new(pi_r.clone())?;
        let m = pi_r.iter().copied().fold(0.0, f64::max);
        if num::abs(m - 1.0) > 1e-12 {
            return Err(HamError::Invalid(format!(
                "ray must have max component 1, found {}",
                m
            )));
        }
        Ok(Self { c, pi_r })
    }

    pub fn ray(&self) -> ShrinkageVector {
        ShrinkageVector(self.pi_r.clone())
    }

    pub fn recompose(&self) -> ShrinkageVector {
        ShrinkageVector(self.pi_r.iter().map(|v| (self.c * v).min(1.0)).collect())
    }

    /// A ray with exactly one active study reproduces the MLE for every `c`.
    pub fn is_degenerate(&self) -> bool {
        let active = self.pi_r.iter().filter(|v| **v >= 1e-12).count();
        active <= 1
    }
}

/// Summarizes one raw study by least squares on `[X | Z]`.
///
/// `sigma2` follows `convention`; `covariate_sds` are the sample standard
/// deviations (denominator `n - 1`) of the columns of `x`.
pub fn summarize_raw_study(
    id: &str,
    x: &Matrix,
    z: Option<&Matrix>,
    y: &[f64],
    intercept_index: Option<usize>,
    convention: SigmaConvention,
) -> Result<StudySummary> {
    let n = x.rows();
    let p = x.cols();
    if y.len() != n {
        return Err(HamError::Dimension {
            what: "outcome vector",
            expected: n,
            found: y.len(),
        });
    }
    let r = match z {
        Some(z) => {
            if z.rows() != n {
                return Err(HamError::Dimension {
                    what: "nuisance design rows",
                    expected: n,
                    found: z.rows(),
                });
            }
            z.cols()
        }
        None => 0,
    };
    let q = p + r;
    if n <= q {
        return Err(HamError::InvalidStudy {
            study: id.into(),
            message: format!("n = {} must exceed q = {}", n, q),
        });
    }
    let mut design = Matrix::zeros(n, q);
    design.set_block(0, 0, x);
    if let Some(z) = z {
        design.set_block(0, p, z);
    }
    let dt = design.transpose();
    let gram = dt.matmul(&design);
    let eig = gram.symmetric_eigenvalues();
    if !(eig[0] > 1e-12 * eig[q - 1]) {
        return Err(HamError::RankDeficient);
    }
    let chol = gram.cholesky().map_err(|_| HamError::RankDeficient)?;
    let coef = chol.solve(&dt.matvec(y));
    let fitted = design.matvec(&coef);
    let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    let sigma2 = match convention {
        SigmaConvention::Mle => rss / n as f64,
        SigmaConvention::Unbiased => rss / (n - q) as f64,
    };
    let xx = gram.block(0, 0, p, p);
    let gram_proj = if r > 0 {
        projected_gram_from_blocks(&xx, &gram.block(0, p, p, r), &gram.block(p, p, r, r))?
    } else {
        xx
    };
    let sds = (0..p)
        .map(|j| sample_sd(&x.column(j)))
        .collect::<Vec<_>>();
    let summary = StudySummary {
        id: id.into(),
        p,
        q,
        n,
        sigma2,
        beta_tilde: coef[..p].to_vec(),
        gram_proj,
        covariate_sds: Some(sds),
        intercept_index,
        rss: Some(rss),
    };
    Ok(summary)
}

/// Sample standard deviation with denominator `n - 1`.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    num::sqrt(ss / (n - 1) as f64)
}

/// `X'MX = X'X - X'Z (Z'Z)^{-1} Z'X` from the Gram blocks.
pub fn projected_gram_from_blocks(xx: &Matrix, xz: &Matrix, zz: &Matrix) -> Result<Matrix> {
    if xz.cols() == 0 {
        return Ok(xx.clone());
    }
    let zz_inv_zx = zz
        .spd_solve(&xz.transpose())
        .map_err(|_| HamError::Singular { what: "Z'Z" })?;
    Ok(xx.sub(&xz.matmul(&zz_inv_zx)).symmetrize())
}

/// Recovers `X'MX = sigma2 * (cov_full[..p, ..p])^{-1}` from the reported
/// covariance of `(beta, gamma)`.
pub fn precision_from_covariance(cov_full: &Matrix, p: usize, sigma2: f64) -> Result<Matrix> {
    if !cov_full.is_square() || cov_full.rows() < p {
        return Err(HamError::Dimension {
            what: "cov_full",
            expected: p,
            found: cov_full.rows(),
        });
    }
    let top = cov_full.block(0, 0, p, p).symmetrize();
    let eig = top.symmetric_eigenvalues();
    if !(eig[0] > PD_REL_TOL * eig[p - 1]) {
        return Err(HamError::Singular {
            what: "shared-covariate block of cov_full",
        });
    }
    Ok(top.spd_inverse()?.scale(sigma2))
}

/// How the per-covariate scale factors are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StandardizeMode {
    /// Each study uses its own sample standard deviations.
    #[default]
    PerStudy,
    /// One pooled within-study SD per covariate, weighted by `n_j - 1`.
    Pooled,
}

/// Scale factors applied by [`standardize`]; row `j` holds study `j`'s factors.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationRecord {
    pub scales: Vec<Vec<f64>>,
}

impl StandardizationRecord {
    fn stacked(&self) -> Vec<f64> {
        self.scales.iter().flatten().copied().collect()
    }

    /// Maps stacked coefficients on the original scale to the standardized scale.
    pub fn forward_estimates(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(self.stacked()).map(|(b, s)| b * s).collect()
    }

    /// Maps stacked standardized coefficients back to the original scale.
    pub fn back_estimates(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(self.stacked()).map(|(b, s)| b / s).collect()
    }

    /// Maps a pk×pk covariance of standardized coefficients back to the original scale.
    pub fn back_covariance(&self, cov: &Matrix) -> Matrix {
        let s = self.stacked();
        let mut out = cov.clone();
        for i in 0..cov.rows() {
            for j in 0..cov.cols() {
                out[(i, j)] = cov[(i, j)] / (s[i] * s[j]);
            }
        }
        out
    }

    /// Maps a p-vector shared by all studies (centroid, fixed effect) back; only
    /// meaningful when every study uses the same factors.
    pub fn back_shared(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.scales[0])
            .map(|(t, s)| t / s)
            .collect()
    }

    /// Undoes [`standardize`] on a problem.
    pub fn restore(&self, problem: &MetaProblem) -> Result<MetaProblem> {
        let studies = problem
            .studies()
            .iter()
            .zip(&self.scales)
            .map(|(s, f)| rescale_study(s, f, true))
            .collect();
        MetaProblem::new(studies)
    }
}

fn rescale_study(s: &StudySummary, f: &[f64], invert: bool) -> StudySummary {
    let f: Vec<f64> = if invert {
        f.iter().map(|v| 1.0 / v).collect()
    } else {
        f.to_vec()
    };
    let mut gram = s.gram_proj.clone();
    for l in 0..s.p {
        for m in 0..s.p {
            gram[(l, m)] = s.gram_proj[(l, m)] / (f[l] * f[m]);
        }
    }
    StudySummary {
        beta_tilde: s.beta_tilde.iter().zip(&f).map(|(b, v)| b * v).collect(),
        gram_proj: gram,
        covariate_sds: s
            .covariate_sds
            .as_ref()
            .map(|sd| sd.iter().zip(&f).map(|(d, v)| d / v).collect()),
        ..s.clone()
    }
}

/// Rescales every non-intercept covariate to unit standard deviation.
///
/// Coefficient `l` becomes `s_l * beta_l` and Gram entry `(l, m)` becomes
/// `G_lm / (s_l s_m)`; the intercept keeps `s = 1` and `sigma2` is unchanged.
pub fn standardize(
    problem: &MetaProblem,
    mode: StandardizeMode,
) -> Result<(MetaProblem, StandardizationRecord)> {
    let p = problem.p();
    let mut raw = Vec::with_capacity(problem.k());
    for s in problem.studies() {
        let sds = s.covariate_sds.as_ref().ok_or_else(|| HamError::InvalidStudy {
            study: s.id.clone(),
            message: "covariate_sds required for standardization".into(),
        })?;
        let mut f = sds.clone();
        if let Some(ix) = s.intercept_index {
            f[ix] = 1.0;
        }
        for (l, v) in f.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(HamError::InvalidStudy {
                    study: s.id.clone(),
                    message: format!("covariate {} has non-positive standard deviation {}", l, v),
                });
            }
        }
        raw.push(f);
    }
    let ix0 = problem.studies()[0].intercept_index;
    if problem.studies().iter().any(|s| s.intercept_index != ix0) {
        return Err(HamError::Invalid(
            "intercept_index differs across studies".into(),
        ));
    }
    let scales = match mode {
        StandardizeMode::PerStudy => raw,
        StandardizeMode::Pooled => {
            let mut pooled = alloc::vec![0.0; p];
            let mut weight = 0.0;
            for (s, f) in problem.studies().iter().zip(&raw) {
                let w = (s.n - 1) as f64;
                weight += w;
                for l in 0..p {
                    pooled[l] += w * f[l] * f[l];
                }
            }
            let pooled: Vec<f64> = pooled.iter().map(|v| num::sqrt(v / weight)).collect();
            alloc::vec![pooled; problem.k()]
        }
    };
    let studies = problem
        .studies()
        .iter()
        .zip(&scales)
        .map(|(s, f)| rescale_study(s, f, false))
        .collect();
    Ok((MetaProblem::new(studies)?, StandardizationRecord { scales }))
}

/// Convenience constructor for a common-covariate study (`q == p`).
pub fn simple_study(id: &str, n: usize, sigma2: f64, beta_tilde: Vec<f64>, gram: Matrix) -> StudySummary {
    let p = beta_tilde.len();
    StudySummary {
        id: id.into(),
        p,
        q: p,
        n,
        sigma2,
        beta_tilde,
        gram_proj: gram,
        covariate_sds: None,
        intercept_index: None,
        rss: None,
    }
}

/// Scalar-precision studies with `p = 1`, `sigma2 = 1` and `X'X = w_j`.
pub fn scalar_problem(weights: &[f64], beta: &[f64]) -> Result<MetaProblem> {
    let studies = weights
        .iter()
        .zip(beta)
        .enumerate()
        .map(|(j, (w, b))| {
            simple_study(
                &format!("s{}", j + 1),
                10,
                1.0,
                alloc::vec![*b],
                Matrix::from_vec(1, 1, alloc::vec![*w]).expect("1x1"),
            )
        })
        .collect();
    MetaProblem::new(studies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ones_design(n: usize) -> Matrix {
        Matrix::from_vec(n, 1, vec![1.0; n]).unwrap()
    }

    #[test]
    fn single_scalar_study_precision() {
        let s = simple_study("a", 10, 1.0, vec![2.0], Matrix::from_vec(1, 1, vec![5.0]).unwrap());
        let p = MetaProblem::new(vec![s]).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.precision_blocks()[0][(0, 0)], 5.0);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = simple_study("a", 10, 1.0, vec![0.0; 2], Matrix::identity(2));
        let b = simple_study("b", 10, 1.0, vec![0.0; 3], Matrix::identity(3));
        let err = MetaProblem::new(vec![a, b]).unwrap_err();
        assert!(matches!(err, HamError::InvalidStudy { ref study, .. } if study == "b"));
    }

    #[test]
    fn indefinite_gram_reports_smallest_eigenvalue() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let s = simple_study("bad", 10, 1.0, vec![0.0; 2], g);
        match MetaProblem::new(vec![s]).unwrap_err() {
            HamError::StudyNotPositiveDefinite {
                study,
                min_eigenvalue,
                ..
            } => {
                assert_eq!(study, "bad");
                assert!((min_eigenvalue + 1.0).abs() < 1e-12);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn raw_intercept_only_study() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let s = summarize_raw_study("s", &ones_design(4), None, &y, Some(0), SigmaConvention::Mle)
            .unwrap();
        assert!((s.beta_tilde[0] - 2.5).abs() < 1e-14);
        assert!((s.sigma2 - 1.25).abs() < 1e-14);
        assert!((s.gram_proj[(0, 0)] - 4.0).abs() < 1e-14);
        let u = summarize_raw_study("s", &ones_design(4), None, &y, None, SigmaConvention::Unbiased)
            .unwrap();
        assert!((u.sigma2 - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_nuisance_leaves_gram_unchanged() {
        let x = Matrix::from_columns(&[vec![1.0, 1.0, 1.0, 1.0], vec![1.0, -1.0, 1.0, -1.0]]).unwrap();
        let z = Matrix::from_columns(&[vec![1.0, 1.0, -1.0, -1.0]]).unwrap();
        let y = [0.3, 1.1, -0.4, 2.0];
        let s = summarize_raw_study("s", &x, Some(&z), &y, Some(0), SigmaConvention::Mle).unwrap();
        let xx = x.transpose().matmul(&x);
        assert!(s.gram_proj.sub(&xx).max_abs() < 1e-14);
    }

    #[test]
    fn collinear_nuisance_is_rank_deficient() {
        let x = Matrix::from_columns(&[vec![1.0, 2.0, 3.0, 5.0]]).unwrap();
        let y = [0.0, 1.0, 0.0, 1.0];
        let err = summarize_raw_study("s", &x, Some(&x), &y, None, SigmaConvention::Mle).unwrap_err();
        assert_eq!(err, HamError::RankDeficient);
    }

    #[test]
    fn covariance_without_nuisance_returns_gram() {
        let g = Matrix::from_rows(&[[10.0, 2.0], [2.0, 7.0]]).unwrap();
        let sigma2 = 2.5;
        let cov = g.spd_inverse().unwrap().scale(sigma2);
        let back = precision_from_covariance(&cov, 2, sigma2).unwrap();
        assert!(back.sub(&g).max_abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_block_rejected() {
        let cov = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(precision_from_covariance(&cov, 2, 1.0).is_err());
    }

    #[test]
    fn standardize_rescales_slope() {
        let n = 50.0;
        let (a, b) = (3.0, 400.0);
        let mut s = simple_study(
            "s",
            50,
            1.0,
            vec![1.0, 0.3],
            Matrix::from_rows(&[[n, a], [a, b]]).unwrap(),
        );
        s.covariate_sds = Some(vec![0.0, 10.0]);
        s.intercept_index = Some(0);
        let p = MetaProblem::new(vec![s]).unwrap();
        let (std, rec) = standardize(&p, StandardizeMode::PerStudy).unwrap();
        let t = &std.studies()[0];
        assert!((t.beta_tilde[0] - 1.0).abs() < 1e-15);
        assert!((t.beta_tilde[1] - 3.0).abs() < 1e-14);
        assert!((t.gram_proj[(0, 1)] - a / 10.0).abs() < 1e-14);
        assert!((t.gram_proj[(1, 1)] - b / 100.0).abs() < 1e-12);
        let back = rec.restore(&std).unwrap();
        assert!(back.studies()[0].gram_proj.sub(&p.studies()[0].gram_proj).max_abs() < 1e-10 * b);
    }

    #[test]
    fn standardize_requires_positive_sds() {
        let mut s = simple_study("s", 20, 1.0, vec![1.0, 2.0], Matrix::identity(2));
        assert!(standardize(&MetaProblem::new(vec![s.clone()]).unwrap(), StandardizeMode::PerStudy).is_err());
        s.covariate_sds = Some(vec![1.0, 0.0]);
        s.intercept_index = Some(0);
        assert!(standardize(&MetaProblem::new(vec![s]).unwrap(), StandardizeMode::PerStudy).is_err());
    }

    #[test]
    fn decompose_round_trip() {
        let pi = ShrinkageVector::new(vec![0.5, 0.25]).unwrap();
        let r = pi.decompose().unwrap();
        assert_eq!(r.c, 0.5);
        assert_eq!(r.pi_r, vec![1.0, 0.5]);
        assert_eq!(r.recompose(), pi);
        assert!(ShrinkageVector::zeros(3).decompose().is_err());
        assert!(ShrinkageVector::new(vec![1.2]).is_err());
    }
}
