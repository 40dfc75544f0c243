//! Data-driven choice of the shrinkage vector and of the ridge penalty.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{HamError, Result};
use crate::estimators::{ham_beta, ridge_operator, HamFit};
use crate::inference::{gradient_expectation_pi, ham_covariance_pi};
use crate::linalg::{norm2, Matrix};
use crate::model::{MetaProblem, ShrinkageVector};
use crate::optimize::{golden_section, nelder_mead, SimplexOptions};
use crate::risk::{pi_star_equal, risk_terms, Clamped, PseudoSign};

/// Objective minimized over the shrinkage box.
#[derive(Clone, Debug, PartialEq)]
pub enum Criterion {
    Pseudo(PseudoSign),
    Umse,
    Bmse,
    /// Oracle selection at known coefficients.
    TrueMse(Vec<f64>),
}

impl Default for Criterion {
    fn default() -> Self {
        Criterion::Pseudo(PseudoSign::Corrected)
    }
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Pseudo(PseudoSign::Corrected) => "pseudo",
            Criterion::Pseudo(PseudoSign::Flipped) => "pseudo-flipped",
            Criterion::Umse => "umse",
            Criterion::Bmse => "bmse",
            Criterion::TrueMse(_) => "true-mse",
        }
    }

    pub fn evaluate(&self, problem: &MetaProblem, pi: &ShrinkageVector) -> Result<f64> {
        let truth = match self {
            Criterion::TrueMse(b) => Some(b.as_slice()),
            _ => None,
        };
        let t = risk_terms(problem, pi, truth)?;
        Ok(match self {
            Criterion::Pseudo(sign) => t.pseudo_mse(*sign),
            Criterion::Umse => t.umse(),
            Criterion::Bmse => t.bmse(),
            Criterion::TrueMse(_) => t.true_mse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOptions {
    /// Objective-change tolerance of the simplex search.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Jittered starts in addition to the plug-in start.
    pub restarts: usize,
    pub upper: f64,
    /// Seeds the restart jitter; `None` uses 0.
    pub seed: Option<u64>,
    pub criterion: Criterion,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 2000,
            restarts: 4,
            upper: 1.0 - 1e-9,
            seed: None,
            criterion: Criterion::default(),
        }
    }
}

impl SelectionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(HamError::Invalid(alloc::format!(
                "selection tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if !(self.upper > 0.0 && self.upper <= 1.0) {
            return Err(HamError::Invalid(alloc::format!(
                "shrinkage box upper bound must lie in (0, 1], got {}",
                self.upper
            )));
        }
        if self.max_iterations == 0 {
            return Err(HamError::Invalid("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionDiagnostics {
    pub criterion: String,
    pub objective: f64,
    /// Objective at the plug-in start.
    pub start_objective: f64,
    pub starts: Vec<Vec<f64>>,
    /// Index into `starts` of the winning run; `None` when `pi = 0` won.
    pub best_start: Option<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Equal-weight optimum with `beta_tilde` plugged in for the truth.
    pub plug_in_pi_star: Option<Clamped>,
    pub warning: Option<String>,
    pub note: Option<String>,
}

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Minimizes the selection criterion over `[0, upper]^k`.
///
/// The search starts at the plug-in equal-weight optimum and adds
/// `opts.restarts` uniform starts. Failure to converge is reported in the
/// diagnostics; the best point found is always returned.
pub fn select_pi(problem: &MetaProblem, opts: &SelectionOptions) -> Result<(ShrinkageVector, SelectionDiagnostics)> {
    opts.validate()?;
    let k = problem.k();
    let mut diag = SelectionDiagnostics {
        criterion: opts.criterion.name().into(),
        ..Default::default()
    };
    if k < 2 {
        let pi = ShrinkageVector::zeros(k);
        diag.objective = opts.criterion.evaluate(problem, &pi)?;
        diag.start_objective = diag.objective;
        diag.converged = true;
        diag.note = Some("single study: nothing to borrow, estimate equals the study MLE".into());
        return Ok((pi, diag));
    }
    if let Criterion::TrueMse(b) = &opts.criterion {
        if b.len() != problem.dim() {
            return Err(HamError::Dimension {
                what: "true coefficients",
                expected: problem.dim(),
                found: b.len(),
            });
        }
    }

    let plug = pi_star_equal(problem, &problem.beta_tilde())?;
    diag.plug_in_pi_star = Some(plug);
    let start_value = if plug.value.is_finite() { plug.value.min(opts.upper) } else { 0.5 };
    let mut starts = alloc::vec![alloc::vec![start_value; k]];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.unwrap_or(0));
    for _ in 0..opts.restarts {
        starts.push((0..k).map(|_| uniform01(&mut rng) * opts.upper).collect());
    }

    let lower = alloc::vec![0.0; k];
    let upper = alloc::vec![opts.upper; k];
    let simplex = SimplexOptions {
        f_tol: opts.tolerance,
        x_tol: 1e-6,
        max_iterations: opts.max_iterations,
        initial_step: 0.1,
    };
    let objective = |x: &[f64]| match ShrinkageVector::new(x.to_vec()) {
        Ok(pi) => opts.criterion.evaluate(problem, &pi).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    };

    // `pi = 0` is always a candidate so exact ties resolve to no borrowing.
    let mut best: Option<(Vec<f64>, f64)> = Some((lower.clone(), objective(&lower)));
    diag.evaluations += 1;
    let mut all_converged = true;
    for (s, x0) in starts.iter().enumerate() {
        if s == 0 {
            diag.start_objective = objective(x0);
        }
        let m = nelder_mead(objective, x0, &lower, &upper, &simplex);
        diag.iterations += m.iterations;
        diag.evaluations += m.evaluations;
        all_converged &= m.converged;
        let take = match &best {
            None => true,
            Some((bx, bf)) => {
                let eps = 1e-12 * (1.0 + bf.abs());
                m.value < bf - eps || ((m.value - bf).abs() <= eps && l1(&m.x) < l1(bx))
            }
        };
        if take {
            diag.best_start = Some(s);
            best = Some((m.x, m.value));
        }
    }
    let (x, value) = best.expect("at least one start");
    diag.objective = value;
    diag.converged = all_converged;
    diag.starts = starts;
    if !value.is_finite() {
        diag.warning = Some("selection objective was not finite at any visited point".into());
    } else if !all_converged {
        diag.warning = Some("simplex search hit the iteration limit on at least one start; raise max_iterations".into());
    }
    Ok((ShrinkageVector::new(x)?, diag))
}

/// [`select_pi`] with the pseudo-MSE criterion enforced.
pub fn select_pi_ham(problem: &MetaProblem, opts: &SelectionOptions) -> Result<(ShrinkageVector, SelectionDiagnostics)> {
    let mut o = opts.clone();
    if !matches!(o.criterion, Criterion::Pseudo(_)) {
        o.criterion = Criterion::default();
    }
    select_pi(problem, &o)
}

/// Unbiased risk estimate of the ridge-like estimator at `lambda`.
pub fn ridge_umse(problem: &MetaProblem, lambda: f64) -> Result<f64> {
    let r = ridge_operator(problem, lambda)?;
    let beta = problem.beta_tilde();
    let rb = r.matvec(&beta);
    let resid: Vec<f64> = rb.iter().zip(&beta).map(|(a, b)| a - b).collect();
    let v = problem.dense_mle_covariance();
    let rv = r.matmul(&v);
    Ok(norm2(&resid) + 2.0 * rv.trace() - v.trace())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RidgeDiagnostics {
    pub objective: f64,
    pub objective_at_zero: f64,
    pub evaluations: usize,
    pub note: Option<String>,
}

const RIDGE_GRID: usize = 97;
const RIDGE_LOG_SPAN: f64 = 8.0;

/// Minimizes [`ridge_umse`] over `lambda >= 0`.
///
/// A log grid spanning eight decades either side of the typical study
/// precision brackets the minimum, which golden-section then refines in
/// `log lambda`.
pub fn select_lambda_ridge(problem: &MetaProblem, opts: &SelectionOptions) -> Result<(f64, RidgeDiagnostics)> {
    let mut diag = RidgeDiagnostics::default();
    let at_zero = ridge_umse(problem, 0.0)?;
    diag.objective_at_zero = at_zero;
    diag.objective = at_zero;
    diag.evaluations = 1;
    if problem.k() < 2 {
        diag.note = Some("single study: penalty has no effect".into());
        return Ok((0.0, diag));
    }
    let scale = problem.dense_precision().trace() / problem.dim() as f64;
    let log_scale = crate::num::ln(scale);
    let step = 2.0 * RIDGE_LOG_SPAN * core::f64::consts::LN_10 / (RIDGE_GRID - 1) as f64;
    let lo = log_scale - RIDGE_LOG_SPAN * core::f64::consts::LN_10;
    let f = |u: f64| ridge_umse(problem, crate::num::exp(u)).unwrap_or(f64::INFINITY);
    let grid: Vec<f64> = (0..RIDGE_GRID).map(|i| lo + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&u| f(u)).collect();
    diag.evaluations += RIDGE_GRID;
    let (imin, vmin) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if !(vmin < at_zero) {
        diag.note = Some("no positive penalty improves on lambda = 0".into());
        return Ok((0.0, diag));
    }
    let a = grid[imin.saturating_sub(1)];
    let b = grid[(imin + 1).min(RIDGE_GRID - 1)];
    let mut evals = 0usize;
    let (u, fu) = golden_section(
        |u| {
            evals += 1;
            f(u)
        },
        a,
        b,
        opts.tolerance.max(1e-10),
        200,
    );
    diag.evaluations += evals;
    let (u, fu) = if fu <= vmin { (u, fu) } else { (grid[imin], vmin) };
    diag.objective = fu;
    Ok((crate::num::exp(u), diag))
}

/// Packages the estimate, centroid and plug-in covariance at a given `pi`.
pub fn fit_at(problem: &MetaProblem, pi: ShrinkageVector, meta: SelectionDiagnostics) -> Result<HamFit> {
    let hb = ham_beta(problem, &pi)?;
    let ray = if pi.is_zero() { None } else { Some(pi.decompose()?) };
    let (gradient, covariance) = if pi.is_zero() {
        (Matrix::identity(problem.dim()), problem.dense_mle_covariance())
    } else {
        (gradient_expectation_pi(problem, &pi)?, ham_covariance_pi(problem, &pi)?)
    };
    Ok(HamFit {
        beta_hat: hb.beta,
        theta_hat: hb.theta,
        pi,
        ray,
        gradient,
        covariance,
        study_ids: problem.studies().iter().map(|s| s.id.clone()).collect(),
        p: problem.p(),
        meta,
    })
}

/// Selects `pi` by `opts.criterion` and fits at the selected value.
pub fn fit_ham(problem: &MetaProblem, opts: &SelectionOptions) -> Result<HamFit> {
    let (pi, meta) = select_pi(problem, opts)?;
    fit_at(problem, pi, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_problem;
    use alloc::vec;

    #[test]
    fn single_study_short_circuits() {
        let prob = scalar_problem(&[3.0], &[1.5]).unwrap();
        let fit = fit_ham(&prob, &SelectionOptions::default()).unwrap();
        assert_eq!(fit.beta_hat, vec![1.5]);
        assert!(fit.theta_hat.is_none());
        assert!(fit.meta.note.is_some());
        let (lambda, _) = select_lambda_ridge(&prob, &SelectionOptions::default()).unwrap();
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn exchangeable_studies_get_equal_weights() {
        // Identical studies make the objective flat; the tie rule picks pi = 0.
        let prob = scalar_problem(&[5.0, 5.0], &[1.0, 1.0]).unwrap();
        let (pi, d) = select_pi(&prob, &SelectionOptions::default()).unwrap();
        assert!((pi.as_slice()[0] - pi.as_slice()[1]).abs() < 1e-4);
        assert_eq!(d.best_start, None);
        // Mirror-symmetric estimates with equal precision.
        let prob = scalar_problem(&[5.0, 5.0], &[1.0, 1.6]).unwrap();
        let (pi, _) = select_pi(&prob, &SelectionOptions::default()).unwrap();
        // The objective is flat to rounding along the anti-diagonal here.
        assert!(pi.as_slice()[0] > 0.01);
        assert!((pi.as_slice()[0] - pi.as_slice()[1]).abs() < 1e-3);
    }

    #[test]
    fn never_worse_than_start() {
        let prob = scalar_problem(&[2.0, 4.0, 1.0], &[1.0, 3.0, 1.7]).unwrap();
        let (_, d) = select_pi(&prob, &SelectionOptions::default()).unwrap();
        assert!(d.objective <= d.start_objective);
        assert!(d.converged);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let prob = scalar_problem(&[2.0, 4.0, 1.0, 0.5], &[1.0, 3.0, 1.7, -0.2]).unwrap();
        let opts = SelectionOptions {
            seed: Some(11),
            ..Default::default()
        };
        let a = select_pi(&prob, &opts).unwrap();
        let b = select_pi(&prob, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ridge_objective_at_zero_is_mle_trace() {
        let prob = scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert!((ridge_umse(&prob, 0.0).unwrap() - 0.75).abs() < 1e-14);
    }

    #[test]
    fn criteria_names_are_distinct() {
        let names = [
            Criterion::default().name(),
            Criterion::Pseudo(PseudoSign::Flipped).name(),
            Criterion::Umse.name(),
            Criterion::Bmse.name(),
            Criterion::TrueMse(vec![]).name(),
        ];
        for i in 0..names.len() {
            for j in 0..i {
                assert_ne!(names[i], names[j]);
            }
        }
    }
}
