//! Verification suites run by `ham check`.
//!
//! Each suite draws random instances, checks one family of properties
//! against an independent computation and reports the first counterexample.

use std::fmt::Write as _;

use ham_core::estimators::{ham_beta, mixing_matrix, objective_value};
use ham_core::inference::ham_covariance_pi;
use ham_core::model::simple_study;
use ham_core::optimize::golden_section;
use ham_core::risk::{c_star, pi_star_equal, risk_terms, true_mse, PseudoSign};
use ham_core::{Matrix, MetaProblem, ShrinkageVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::rng::{stream, tag};
use crate::sim::{replicate, run_cells, CellSpec, EstimatorKind, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Oracle,
    MseShape,
    PseudoRay,
    Calibration,
    Consistency,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Oracle,
        Suite::MseShape,
        Suite::PseudoRay,
        Suite::Calibration,
        Suite::Consistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::MseShape => "mse-shape",
            Suite::PseudoRay => "pseudo-ray",
            Suite::Calibration => "calibration",
            Suite::Consistency => "consistency",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    /// Random instances per suite; `None` uses each suite's default.
    pub instances: Option<usize>,
    pub seed: u64,
    /// Fault-injection hook: the sign used wherever a suite evaluates the pseudo-MSE.
    pub pseudo_sign: PseudoSign,
    pub calibration_replicates: usize,
    pub consistency_replicates: usize,
    pub threads: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            instances: None,
            seed: 0,
            pseudo_sign: PseudoSign::Corrected,
            calibration_replicates: 100_000,
            consistency_replicates: 200,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub checks: usize,
    pub summary: String,
    pub counterexample: Option<Value>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random instance with known truth.
#[derive(Clone, Debug)]
pub struct Instance {
    pub problem: MetaProblem,
    pub truth: Vec<f64>,
}

impl Instance {
    pub fn to_json(&self) -> Value {
        let studies: Vec<Value> = self
            .problem
            .studies()
            .iter()
            .map(|s| json!({"id": s.id, "sigma2": s.sigma2, "gram_proj": s.gram_proj.to_rows(), "beta_tilde": s.beta_tilde}))
            .collect();
        json!({"studies": studies, "beta_true": self.truth})
    }
}

/// `k` studies of dimension `p` with Gram `n (A A'/p + I/2)`, truth scattered
/// around a common centre and `beta_tilde ~ N(beta, V)` unless `noise_free`.
pub fn random_instance(rng: &mut ChaCha8Rng, k: usize, p: usize, noise_free: bool) -> Instance {
    let centre: Vec<f64> = (0..p).map(|_| 2.0 * normal(rng)).collect();
    let spread = rng.random_range(0.05..1.0);
    let mut studies = Vec::with_capacity(k);
    let mut truth = Vec::with_capacity(k * p);
    for j in 0..k {
        let n = rng.random_range(10..200usize);
        let a = Matrix::from_vec(p, p, (0..p * p).map(|_| normal(rng)).collect()).expect("square");
        let mut gram = a.matmul(&a.transpose()).scale(1.0 / p as f64);
        for l in 0..p {
            gram[(l, l)] += 0.5;
        }
        let gram = gram.scale(n as f64).symmetrize();
        let sigma2 = rng.random_range(0.25..4.0);
        let beta: Vec<f64> = centre.iter().map(|c| c + spread * normal(rng)).collect();
        let beta_tilde = if noise_free {
            beta.clone()
        } else {
            let v = gram.spd_inverse().expect("pd").scale(sigma2);
            let l = v.cholesky().expect("pd");
            let e: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
            let shock = l.factor().matvec(&e);
            beta.iter().zip(shock).map(|(b, s)| b + s).collect()
        };
        truth.extend_from_slice(&beta);
        studies.push(simple_study(&format!("s{}", j + 1), n, sigma2, beta_tilde, gram));
    }
    Instance {
        problem: MetaProblem::new(studies).expect("valid instance"),
        truth,
    }
}

/// A ray with maximum 1 and at least two positive entries.
fn random_ray(rng: &mut ChaCha8Rng, k: usize) -> ShrinkageVector {
    let mut r: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let top = rng.random_range(0..k);
    r[top] = 1.0;
    ShrinkageVector::new(r).expect("in range")
}

fn scaled(ray: &ShrinkageVector, c: f64) -> ShrinkageVector {
    ShrinkageVector::new(ray.as_slice().iter().map(|r| c * r).collect()).expect("in range")
}

fn instance_rng(opts: &CheckOptions, suite: Suite, i: usize) -> ChaCha8Rng {
    stream(opts.seed, tag(&format!("check/{}", suite.name())), i as u64)
}

/// Maximizes `f` by Newton iterations with central-difference derivatives.
fn newton_fd(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let at = |x: &[f64], i: usize, di: f64, j: usize, dj: f64| {
        let mut y = x.to_vec();
        y[i] += di;
        y[j] += dj;
        f(&y)
    };
    for _ in 0..50 {
        let grad: Vec<f64> = (0..d).map(|i| (at(&x, i, h, i, 0.0) - at(&x, i, -h, i, 0.0)) / (2.0 * h)).collect();
        let mut hess = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = if i == j {
                    (at(&x, i, h, i, 0.0) - 2.0 * f(&x) + at(&x, i, -h, i, 0.0)) / (h * h)
                } else {
                    (at(&x, i, h, j, h) - at(&x, i, h, j, -h) - at(&x, i, -h, j, h) + at(&x, i, -h, j, -h))
                        / (4.0 * h * h)
                };
                hess[(i, j)] = -v;
                hess[(j, i)] = -v;
            }
        }
        // Ascent on f is descent on -f, whose Hessian is `hess`.
        let Ok(step) = hess.spd_solve_vec(&grad) else {
            break;
        };
        let size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi += si;
        }
        if size < 1e-13 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
    }
    x
}

fn oracle(opts: &CheckOptions) -> SuiteResult {
    let n = opts.instances.unwrap_or(20);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = instance_rng(opts, Suite::Oracle, i);
        let k = rng.random_range(2..=4);
        let p = rng.random_range(1..=3);
        let inst = random_instance(&mut rng, k, p, false);
        let pi = ShrinkageVector::new((0..k).map(|_| rng.random_range(0.05..0.95)).collect()).expect("in range");
        let problem = &inst.problem;
        let dim = k * p;
        let f = |x: &[f64]| objective_value(problem, &x[..dim], &x[dim..], &pi).expect("finite penalty");
        let mut x0 = problem.beta_tilde();
        x0.extend_from_slice(&problem.beta_tilde()[..p]);
        let x = newton_fd(&f, &x0, 1e-2);
        let closed = ham_beta(problem, &pi).expect("positive pi");
        let mut want = closed.beta.clone();
        want.extend(closed.theta.expect("centroid exists"));
        let err = x.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err);
        if !(err <= 1e-6) {
            return SuiteResult {
                suite: Suite::Oracle,
                passed: false,
                checks: i + 1,
                summary: format!("instance {i}: numeric and closed-form maximizers differ by {err:e}"),
                counterexample: Some(json!({"instance": inst.to_json(), "pi": pi.as_slice(), "numeric": x, "closed_form": want})),
            };
        }
    }
    SuiteResult {
        suite: Suite::Oracle,
        passed: true,
        checks: n,
        summary: format!("{n} instances, max |numeric - closed form| = {worst:.2e}"),
        counterexample: None,
    }
}

fn fail(suite: Suite, checks: usize, summary: String, ce: Value) -> SuiteResult {
    SuiteResult {
        suite,
        passed: false,
        checks,
        summary,
        counterexample: Some(ce),
    }
}

fn mse_shape(opts: &CheckOptions) -> SuiteResult {
    let n = opts.instances.unwrap_or(100);
    let mut checks = 0;
    let mut worst_fit = 0.0f64;
    for i in 0..n {
        let mut rng = instance_rng(opts, Suite::MseShape, i);
        let k = rng.random_range(2..=5);
        let p = rng.random_range(1..=3);
        let inst = random_instance(&mut rng, k, p, false);
        let (problem, truth) = (&inst.problem, &inst.truth);
        let ce = |what: &str, extra: Value| json!({"check": what, "instance": inst.to_json(), "detail": extra});

        // Equal borrowing at its optimum beats no borrowing.
        let star = pi_star_equal(problem, truth).expect("k >= 2");
        let at_star = true_mse(problem, &ShrinkageVector::constant(k, star.value).expect("clamped"), truth)
            .expect("finite");
        let at_zero = problem.trace_mle_covariance();
        checks += 1;
        if !(at_star < at_zero) {
            let d = json!({"pi_star": star.value, "mse_star": at_star, "mse_zero": at_zero});
            return fail(Suite::MseShape, checks, format!("instance {i}: MSE(pi*) >= MSE(0)"), ce("equal", d));
        }

        let ray = random_ray(&mut rng, k);
        let cs = c_star(problem, &ray, truth).expect("non-degenerate ray").unclamped;
        checks += 1;
        if !(cs > 0.0) {
            let d = json!({"ray": ray.as_slice(), "c_star": cs});
            return fail(Suite::MseShape, checks, format!("instance {i}: c* = {cs} is not positive"), ce("c_star", d));
        }

        let mse = |c: f64| true_mse(problem, &scaled(&ray, c), truth).expect("finite");
        // Quadratic through c = 0, 1/2, 1.
        let (m0, mh, m1) = (mse(0.0), mse(0.5), mse(1.0));
        let a = 2.0 * (m1 - 2.0 * mh + m0);
        let b = m1 - m0 - a;
        for g in 1..=100 {
            let c = g as f64 / 100.0;
            let actual = mse(c);
            let fit = m0 + b * c + a * c * c;
            let resid = (fit - actual).abs() / actual.abs().max(1.0);
            worst_fit = worst_fit.max(resid);
            checks += 2;
            if !(resid < 1e-10) {
                let d = json!({"ray": ray.as_slice(), "c": c, "mse": actual, "quadratic": fit});
                return fail(Suite::MseShape, checks, format!("instance {i}: MSE(c) not quadratic at c = {c}"), ce("quadratic", d));
            }
            // Skip grid points numerically on the boundary 2c*.
            if (c - 2.0 * cs).abs() <= 1e-9 * (1.0 + cs) {
                continue;
            }
            if (actual < m0) != (c < 2.0 * cs) {
                let d = json!({"ray": ray.as_slice(), "c": c, "c_star": cs, "mse": actual, "mse_zero": m0});
                return fail(Suite::MseShape, checks, format!("instance {i}: improvement region disagrees with (0, 2c*) at c = {c}"), ce("region", d));
            }
        }
    }
    SuiteResult {
        suite: Suite::MseShape,
        passed: true,
        checks,
        summary: format!("{n} instances, max quadratic-fit residual {worst_fit:.2e}"),
        counterexample: None,
    }
}

/// Without noise the pseudo-MSE must recover a scale that improves on the MLE.
fn pseudo_ray(opts: &CheckOptions) -> SuiteResult {
    let n = opts.instances.unwrap_or(100);
    for i in 0..n {
        let mut rng = instance_rng(opts, Suite::PseudoRay, i);
        let k = rng.random_range(2..=5);
        let p = rng.random_range(1..=3);
        let inst = random_instance(&mut rng, k, p, true);
        let ray = random_ray(&mut rng, k);
        let problem = &inst.problem;
        let cs = c_star(problem, &ray, &inst.truth).expect("non-degenerate ray").unclamped;
        let pseudo = |c: f64| {
            risk_terms(problem, &scaled(&ray, c), None)
                .map(|t| t.pseudo_mse(opts.pseudo_sign))
                .unwrap_or(f64::INFINITY)
        };
        let (c_min, o_min) = golden_section(pseudo, 0.0, 1.0, 1e-10, 200);
        let o0 = pseudo(0.0);
        let improves = o_min < o0 - 1e-12 * (1.0 + o0.abs());
        if !(improves && c_min > 0.0 && c_min < 2.0 * cs) {
            let ce = json!({
                "instance": inst.to_json(),
                "ray": ray.as_slice(),
                "pseudo_sign": format!("{:?}", opts.pseudo_sign),
                "c_min": c_min,
                "c_star": cs,
                "pseudo_at_min": o_min,
                "pseudo_at_zero": o0,
            });
            return fail(
                Suite::PseudoRay,
                i + 1,
                format!("instance {i}: pseudo-MSE minimizer {c_min:.3e} outside (0, 2c* = {:.3e})", 2.0 * cs),
                ce,
            );
        }
    }
    SuiteResult {
        suite: Suite::PseudoRay,
        passed: true,
        checks: n,
        summary: format!("{n} noise-free instances, pseudo-MSE minimizer inside (0, 2c*)"),
        counterexample: None,
    }
}

/// Fixed instance for the Monte-Carlo checks: three studies, two covariates.
pub fn calibration_instance() -> Instance {
    let grams = [
        [[60.0, 12.0], [12.0, 40.0]],
        [[90.0, -10.0], [-10.0, 70.0]],
        [[45.0, 5.0], [5.0, 30.0]],
    ];
    let truth = vec![1.0, 2.0, 1.3, 1.7, 0.8, 2.4];
    let studies = grams
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let gram = Matrix::from_rows(g).expect("2x2");
            simple_study(&format!("s{}", j + 1), 100, 1.0, truth[2 * j..2 * j + 2].to_vec(), gram)
        })
        .collect();
    Instance {
        problem: MetaProblem::new(studies).expect("valid"),
        truth,
    }
}

/// Draws `beta_tilde ~ N(beta, V)` study by study.
struct NoiseSampler {
    factors: Vec<Matrix>,
    truth: Vec<f64>,
    p: usize,
}

impl NoiseSampler {
    fn new(inst: &Instance) -> Self {
        Self {
            factors: inst
                .problem
                .covariance_blocks()
                .iter()
                .map(|v| v.cholesky().expect("pd").factor().clone())
                .collect(),
            truth: inst.truth.clone(),
            p: inst.problem.p(),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = self.truth.clone();
        for (j, l) in self.factors.iter().enumerate() {
            let e: Vec<f64> = (0..self.p).map(|_| normal(rng)).collect();
            for (o, s) in out[j * self.p..(j + 1) * self.p].iter_mut().zip(l.matvec(&e)) {
                *o += s;
            }
        }
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn calibration(opts: &CheckOptions) -> SuiteResult {
    let inst = calibration_instance();
    let problem = &inst.problem;
    let pi = ShrinkageVector::new(vec![0.5, 0.3, 0.7]).expect("in range");
    let reps = opts.calibration_replicates.max(2);
    let terms = risk_terms(problem, &pi, Some(&inst.truth)).expect("valid");
    let truth_mse = terms.true_mse().expect("truth given");
    let sampler = NoiseSampler::new(&inst);
    let mut rng = stream(opts.seed, tag("check/calibration"), 0);
    let dim = problem.dim();
    let (mut s_umse, mut s_bmse, mut s_err) = (0.0, 0.0, 0.0);
    let mut mean = vec![0.0; dim];
    let mut second = Matrix::zeros(dim, dim);
    for _ in 0..reps {
        let bt = sampler.draw(&mut rng);
        let noisy = problem.with_beta_tilde(&bt).expect("same shape");
        let t = risk_terms(&noisy, &pi, None).expect("valid");
        s_umse += t.umse();
        s_bmse += t.bmse();
        let est = ham_beta(&noisy, &pi).expect("positive pi").beta;
        s_err += est.iter().zip(&inst.truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for a in 0..dim {
            mean[a] += est[a];
            for b in 0..dim {
                second[(a, b)] += est[a] * est[b];
            }
        }
    }
    let r = reps as f64;
    let (m_umse, m_bmse, m_err) = (s_umse / r, s_bmse / r, s_err / r);
    let mut emp = Matrix::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            emp[(a, b)] = (second[(a, b)] - mean[a] * mean[b] / r) / (r - 1.0);
        }
    }
    let analytic = ham_covariance_pi(problem, &pi).expect("valid");
    let cov_rel = emp.sub(&analytic).frobenius() / analytic.frobenius();
    let checks = [
        ("mean UMSE vs true MSE", rel(m_umse, truth_mse), 0.02),
        ("mean BMSE - true MSE vs tr_var", rel(m_bmse - truth_mse, terms.tr_var), 0.02),
        ("empirical error vs true MSE", rel(m_err, truth_mse), 0.02),
        ("empirical covariance vs analytic (Frobenius)", cov_rel, 0.05),
    ];
    let mut summary = String::new();
    let mut passed = true;
    for (name, got, tol) in checks {
        let _ = write!(summary, "{name}: {:.2}% (limit {:.0}%); ", 100.0 * got, 100.0 * tol);
        passed &= got <= tol;
    }
    let _ = write!(summary, "{reps} replicates");
    SuiteResult {
        suite: Suite::Calibration,
        passed,
        checks: checks.len(),
        summary,
        counterexample: (!passed).then(|| {
            json!({"instance": inst.to_json(), "pi": pi.as_slice(), "true_mse": truth_mse, "tr_var": terms.tr_var,
                   "mean_umse": m_umse, "mean_bmse": m_bmse, "mean_error": m_err, "covariance_rel_error": cov_rel})
        }),
    }
}

pub const CONSISTENCY_N: [usize; 4] = [100, 400, 1600, 6400];

/// Mean squared error and mean borrowing scale of HAM as the sample size grows.
/// One sample size of the consistency sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrendPoint {
    pub n: usize,
    /// Mean of ||beta_hat - beta||^2 over replicates.
    pub error: f64,
    /// Mean of max_j pi_j.
    pub max_pi: f64,
    /// Mean over replicates of the largest weight any study's estimate puts
    /// on the other studies.
    pub external_weight: f64,
}

/// Largest `tr(pi_j sum_{i != j} A_i) / p` over studies.
///
/// Unlike `max pi`, this vanishes when a single study sits at `pi = 1` while
/// the rest go to 0: that study's centroid is then its own estimate.
pub fn external_weight(problem: &MetaProblem, pi: &[f64]) -> Result<f64, String> {
    let sv = ShrinkageVector::new(pi.to_vec()).map_err(|e| e.to_string())?;
    if sv.is_zero() {
        return Ok(0.0);
    }
    let mix = mixing_matrix(problem, &sv).map_err(|e| e.to_string())?;
    let p = problem.p() as f64;
    Ok((0..problem.k())
        .map(|j| {
            let others: f64 = (0..problem.k()).filter(|&i| i != j).map(|i| mix.a_block(i).trace()).sum();
            pi[j] * others / p
        })
        .fold(0.0, f64::max))
}

pub fn consistency_trend(opts: &CheckOptions) -> Result<Vec<TrendPoint>, String> {
    let beta = vec![vec![1.0, 2.0], vec![1.3, 1.7], vec![0.7, 2.2]];
    let mut out = Vec::new();
    for n in CONSISTENCY_N {
        let cell = CellSpec::Custom {
            n: vec![n; 3],
            beta: beta.clone(),
            sigma2: vec![1.0; 3],
        };
        let mut cfg = SimConfig::new(vec![cell.clone()], opts.consistency_replicates, opts.seed);
        cfg.estimators = vec![EstimatorKind::Ham];
        cfg.threads = opts.threads;
        cfg.selection.flipped_pseudo_sign = opts.pseudo_sign == PseudoSign::Flipped;
        let report = run_cells(&cfg)?;
        let e = &report.cells[0].estimators[0];
        if e.excluded > 0 {
            return Err(format!("n = {n}: {} replicates failed", e.excluded));
        }
        let draws = e.pi_draws.len().max(1) as f64;
        let max_pi = e.pi_draws.iter().map(|d| d.iter().fold(0.0f64, |m, v| m.max(*v))).sum::<f64>() / draws;
        let mut ext = 0.0;
        for (r, pi) in e.pi_draws.iter().enumerate() {
            ext += external_weight(&replicate(&cell, opts.seed, r as u64)?.problem, pi)?;
        }
        out.push(TrendPoint {
            n,
            error: e.emse,
            max_pi,
            external_weight: ext / draws,
        });
    }
    Ok(out)
}

/// Error and the borrowing actually applied both fall with `n`. `max pi` is
/// reported but not required to fall: see [`external_weight`].
fn consistency(opts: &CheckOptions) -> SuiteResult {
    let trend = match consistency_trend(opts) {
        Ok(t) => t,
        Err(e) => return fail(Suite::Consistency, 0, format!("simulation failed: {e}"), Value::Null),
    };
    let decreasing = trend
        .windows(2)
        .all(|w| w[1].error < w[0].error && w[1].external_weight < w[0].external_weight);
    let summary = trend
        .iter()
        .map(|t| format!("n={}: error {:.5}, external weight {:.4}, max pi {:.3}", t.n, t.error, t.external_weight, t.max_pi))
        .collect::<Vec<_>>()
        .join("; ");
    SuiteResult {
        suite: Suite::Consistency,
        passed: decreasing,
        checks: trend.len(),
        summary,
        counterexample: (!decreasing).then(|| json!(trend)),
    }
}

pub fn run_suite(suite: Suite, opts: &CheckOptions) -> SuiteResult {
    match suite {
        Suite::Oracle => oracle(opts),
        Suite::MseShape => mse_shape(opts),
        Suite::PseudoRay => pseudo_ray(opts),
        Suite::Calibration => calibration(opts),
        Suite::Consistency => consistency(opts),
    }
}

pub fn results_table(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<6} {:>7}  summary", "suite", "result", "checks");
    for r in results {
        let _ = writeln!(
            out,
            "{:<12} {:<6} {:>7}  {}",
            r.suite.name(),
            if r.passed { "PASS" } else { "FAIL" },
            r.checks,
            r.summary
        );
    }
    out
}
