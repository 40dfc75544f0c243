use ham_core::estimators::{centroid, fixed_effect, ham_beta, mixing_matrix, ridge_fit};
use ham_core::inference::{confidence_intervals, gradient_expectation_pi, ham_covariance_pi};
use ham_core::model::{simple_study, standardize, StandardizeMode};
use ham_core::risk::{
    c_hat, c_star, c_tilde, dense_risk_terms, mse_in_c, pi_star_equal, pseudo_mse, risk_terms, true_mse,
    umse, PseudoSign,
};
use ham_core::selection::{fit_at, ridge_umse, select_lambda_ridge, select_pi, SelectionOptions};
use ham_core::{Matrix, MetaProblem, ShrinkageVector};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Instance {
    problem: MetaProblem,
    truth: Vec<f64>,
}

fn spd(p: usize, entries: &[f64], ridge: f64) -> Matrix {
    let a = Matrix::from_vec(p, p, entries.to_vec()).unwrap();
    let mut g = a.transpose().matmul(&a);
    g.add_scaled(ridge, &Matrix::identity(p));
    g
}

fn instance(max_k: usize, max_p: usize) -> impl Strategy<Value = Instance> {
    (2..=max_k, 1..=max_p).prop_flat_map(|(k, p)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, p * p), k),
            prop::collection::vec(0.2..3.0f64, k),
            prop::collection::vec(0.3..2.0f64, k),
            prop::collection::vec(-2.0..2.0f64, k * p),
            prop::collection::vec(-1.0..1.0f64, k * p),
        )
            .prop_map(move |(grams, ridges, sig, truth, noise)| {
                let studies = (0..k)
                    .map(|j| {
                        let b: Vec<f64> = (0..p).map(|l| truth[j * p + l] + noise[j * p + l]).collect();
                        simple_study(&format!("s{j}"), 50, sig[j], b, spd(p, &grams[j], ridges[j]))
                    })
                    .collect();
                Instance {
                    problem: MetaProblem::new(studies).unwrap(),
                    truth,
                }
            })
    })
}

fn pi_for(k: usize) -> impl Strategy<Value = ShrinkageVector> {
    prop::collection::vec(0.0..=1.0f64, k).prop_map(|v| ShrinkageVector::new(v).unwrap())
}

fn with_pi(max_k: usize, max_p: usize) -> impl Strategy<Value = (Instance, ShrinkageVector)> {
    instance(max_k, max_p).prop_flat_map(|inst| {
        let k = inst.problem.k();
        (Just(inst), pi_for(k).prop_filter("some borrowing", |p| p.max() > 1e-3))
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn scaled(ray: &ShrinkageVector, c: f64) -> ShrinkageVector {
    ShrinkageVector::new(ray.as_slice().iter().map(|v| (v * c).min(1.0)).collect()).unwrap()
}

fn ray_of(pi: &ShrinkageVector) -> ShrinkageVector {
    pi.decompose().unwrap().ray()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_terms_match_dense((inst, pi) in with_pi(5, 3)) {
        let a = risk_terms(&inst.problem, &pi, Some(&inst.truth)).unwrap();
        let b = dense_risk_terms(&inst.problem, &pi, Some(&inst.truth)).unwrap();
        let scale = a.tr_var_mle;
        prop_assert!((a.tr_cov - b.tr_cov).abs() < 1e-9 * scale);
        prop_assert!((a.tr_var - b.tr_var).abs() < 1e-9 * scale);
        prop_assert!(rel(a.bias_norm2_hat, b.bias_norm2_hat) < 1e-8 || (a.bias_norm2_hat - b.bias_norm2_hat).abs() < 1e-12);
        prop_assert!((a.bias_norm2_true.unwrap() - b.bias_norm2_true.unwrap()).abs() < 1e-8 * (1.0 + b.bias_norm2_true.unwrap()));
        prop_assert!(rel(a.tr_var_mle, b.tr_var_mle) < 1e-12);
    }

    #[test]
    fn sign_lemma((inst, pi) in with_pi(5, 3)) {
        let interior = pi.as_slice().iter().filter(|v| **v > 0.0 && **v < 1.0).count();
        prop_assume!(interior >= 2);
        let t = risk_terms(&inst.problem, &pi, None).unwrap();
        prop_assert!(t.tr_cov < 0.0);
    }

    #[test]
    fn bmse_exceeds_umse_by_tr_var((inst, pi) in with_pi(5, 3)) {
        let t = risk_terms(&inst.problem, &pi, None).unwrap();
        prop_assert!(t.bmse() >= t.umse());
        prop_assert!((t.bmse() - t.umse() - t.tr_var).abs() < 1e-12 * (1.0 + t.bmse().abs()));
    }

    #[test]
    fn mse_is_quadratic_in_c((inst, pi) in with_pi(4, 3), cs in prop::collection::vec(0.0..1.0f64, 20)) {
        let ray = ray_of(&pi);
        // Least-squares fit of 3 coefficients through 20 points.
        let rows: Vec<Vec<f64>> = cs.iter().map(|c| vec![1.0, *c, c * c]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = cs.iter().map(|c| true_mse(&inst.problem, &scaled(&ray, *c), &inst.truth).unwrap()).collect();
        let xtx = x.transpose().matmul(&x);
        let xty = x.transpose().matvec(&y);
        prop_assume!(xtx.symmetric_eigenvalues()[0] > 1e-6);
        let coef = xtx.spd_solve_vec(&xty).unwrap();
        let fitted = x.matvec(&coef);
        let resid: f64 = fitted.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = y.iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(resid < 1e-10 * scale);
    }

    #[test]
    fn equal_weight_optimum_dominates_mle(inst in instance(5, 3)) {
        let ps = pi_star_equal(&inst.problem, &inst.truth).unwrap();
        prop_assert!(ps.value > 0.0);
        let at = ShrinkageVector::constant(inst.problem.k(), ps.value).unwrap();
        let zero = ShrinkageVector::zeros(inst.problem.k());
        prop_assert!(
            true_mse(&inst.problem, &at, &inst.truth).unwrap()
                < true_mse(&inst.problem, &zero, &inst.truth).unwrap()
        );
    }

    #[test]
    fn dominance_region_is_below_twice_c_star((inst, pi) in with_pi(4, 3)) {
        let ray = ray_of(&pi);
        let rs = ray.decompose().unwrap();
        prop_assume!(!rs.is_degenerate());
        let cs = c_star(&inst.problem, &ray, &inst.truth).unwrap();
        prop_assert!(cs.unclamped > 0.0);
        let q = mse_in_c(&inst.problem, &rs, &inst.truth).unwrap();
        let m0 = q.eval(0.0);
        for i in 1..=100 {
            let c = i as f64 / 100.0;
            let diff = q.eval(c) - m0;
            let margin = (c - 2.0 * cs.unclamped).abs();
            prop_assume!(margin > 1e-6);
            prop_assert_eq!(diff < 0.0, c < 2.0 * cs.unclamped);
        }
    }

    #[test]
    fn pseudo_mse_stationary_at_bmse_root((inst, pi) in with_pi(4, 3)) {
        let ray = ray_of(&pi);
        prop_assume!(!ray.decompose().unwrap().is_degenerate());
        let ct = c_tilde(&inst.problem, &ray).unwrap();
        let h = 1e-5;
        prop_assume!(ct > 2.0 * h && ct + 2.0 * h < 1.0);
        let f = |c: f64| pseudo_mse(&inst.problem, &scaled(&ray, c), PseudoSign::Corrected).unwrap();
        let d = (f(ct + h) - f(ct - h)) / (2.0 * h);
        prop_assert!(d.abs() < 1e-8 * (1.0 + f(ct).abs()));
    }

    #[test]
    fn umse_vertex((inst, pi) in with_pi(4, 3)) {
        let ray = ray_of(&pi);
        let ch = c_hat(&inst.problem, &ray).unwrap();
        let h = 1e-4;
        prop_assume!(ch > h && ch + h < 1.0);
        let f = |c: f64| umse(&inst.problem, &scaled(&ray, c)).unwrap();
        prop_assert!(f(ch) <= f(ch - h) + 1e-12 && f(ch) <= f(ch + h) + 1e-12);
    }

    #[test]
    fn covariance_is_sandwich_and_psd((inst, pi) in with_pi(4, 3)) {
        let g = gradient_expectation_pi(&inst.problem, &pi).unwrap();
        let v = inst.problem.dense_mle_covariance();
        let dense = g.matmul(&v).matmul(&g.transpose());
        let closed = ham_covariance_pi(&inst.problem, &pi).unwrap();
        prop_assert!(dense.sub(&closed).max_abs() < 1e-10 * (1.0 + v.max_abs()));
        prop_assert!(closed.is_symmetric(1e-12));
        let min = closed.symmetric_eigenvalues()[0];
        prop_assert!(min >= -1e-10 * closed.trace());
    }

    #[test]
    fn gradient_matches_finite_differences((inst, pi) in with_pi(4, 2)) {
        let g = gradient_expectation_pi(&inst.problem, &pi).unwrap();
        let base = inst.problem.beta_tilde();
        let dim = base.len();
        let h = 1e-4;
        for col in 0..dim {
            let mut up = base.clone();
            up[col] += h;
            let mut dn = base.clone();
            dn[col] -= h;
            let fu = ham_beta(&inst.problem.with_beta_tilde(&up).unwrap(), &pi).unwrap().beta;
            let fd = ham_beta(&inst.problem.with_beta_tilde(&dn).unwrap(), &pi).unwrap().beta;
            for row in 0..dim {
                let d = (fu[row] - fd[row]) / (2.0 * h);
                prop_assert!((d - g[(row, col)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn estimate_lies_between_mle_and_centroid((inst, pi) in with_pi(5, 3)) {
        let hb = ham_beta(&inst.problem, &pi).unwrap();
        let theta = hb.theta.unwrap();
        let p = inst.problem.p();
        let bt = inst.problem.beta_tilde();
        for (idx, b) in hb.beta.iter().enumerate() {
            let lo = bt[idx].min(theta[idx % p]);
            let hi = bt[idx].max(theta[idx % p]);
            prop_assert!(*b >= lo - 1e-12 && *b <= hi + 1e-12);
        }
    }

    #[test]
    fn mixing_rows_are_stochastic((inst, pi) in with_pi(5, 3)) {
        // A K = I: the centroid of identical estimates is that estimate.
        let mix = mixing_matrix(&inst.problem, &pi).unwrap();
        let p = inst.problem.p();
        let mut sum = Matrix::zeros(p, p);
        for i in 0..inst.problem.k() {
            sum.add_scaled(1.0, mix.a_block(i));
        }
        prop_assert!(sum.sub(&Matrix::identity(p)).max_abs() < 1e-10);
        let full = centroid(&inst.problem, &ShrinkageVector::constant(inst.problem.k(), 1.0).unwrap()).unwrap();
        let fe = fixed_effect(&inst.problem).unwrap();
        for (a, b) in full.iter().zip(&fe) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn interval_test_duality((inst, pi) in with_pi(4, 3), alpha in 0.01..0.3f64) {
        let fit = fit_at(&inst.problem, pi, Default::default()).unwrap();
        let table = confidence_intervals(&fit, alpha).unwrap();
        for row in &table.rows {
            let outside = row.null < row.lower || row.null > row.upper;
            if let Some(sig) = row.significant {
                let p = row.p_value.unwrap();
                prop_assume!((p - alpha).abs() > 1e-9);
                prop_assert_eq!(sig, outside);
            }
            prop_assert!(row.lower < row.upper);
        }
    }

    #[test]
    fn standardize_round_trip(inst in instance(4, 3), sds in prop::collection::vec(0.1..10.0f64, 3)) {
        let p = inst.problem.p();
        let studies: Vec<_> = inst.problem.studies().iter().map(|s| {
            let mut s = s.clone();
            s.covariate_sds = Some(sds[..p].to_vec());
            s
        }).collect();
        let prob = MetaProblem::new(studies).unwrap();
        let (std_prob, rec) = standardize(&prob, StandardizeMode::PerStudy).unwrap();
        let back = rec.back_estimates(&std_prob.beta_tilde());
        for (a, b) in back.iter().zip(prob.beta_tilde()) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
        // Shrinkage commutes with per-coordinate rescaling when scales are shared.
        let restored = rec.restore(&std_prob).unwrap();
        prop_assert!(restored.dense_precision().sub(&prob.dense_precision()).max_abs() < 1e-8 * (1.0 + prob.dense_precision().max_abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(25))]

    #[test]
    fn optimizer_beats_grid(w in prop::collection::vec(0.5..5.0f64, 2), b in prop::collection::vec(-2.0..2.0f64, 2)) {
        let prob = ham_core::model::scalar_problem(&w, &b).unwrap();
        let (_, d) = select_pi(&prob, &SelectionOptions::default()).unwrap();
        let mut grid_best = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let pi = ShrinkageVector::new(vec![(i as f64 * 0.005).min(1.0 - 1e-9), (j as f64 * 0.005).min(1.0 - 1e-9)]).unwrap();
                grid_best = grid_best.min(pseudo_mse(&prob, &pi, PseudoSign::Corrected).unwrap());
            }
        }
        prop_assert!(d.objective <= grid_best + 1e-5);
        prop_assert!((d.objective - grid_best).abs() < 1e-5);
    }

    #[test]
    fn ridge_refinement_matches_dense_grid(inst in instance(4, 2)) {
        let (lambda, d) = select_lambda_ridge(&inst.problem, &SelectionOptions::default()).unwrap();
        let scale = inst.problem.dense_precision().trace() / inst.problem.dim() as f64;
        let mut best = ridge_umse(&inst.problem, 0.0).unwrap();
        for i in 0..1000 {
            let u = -8.0 + 16.0 * i as f64 / 999.0;
            best = best.min(ridge_umse(&inst.problem, scale * 10f64.powf(u)).unwrap());
        }
        prop_assert!(d.objective <= best + 1e-4 * best.abs());
        prop_assert!((ridge_umse(&inst.problem, lambda).unwrap() - d.objective).abs() < 1e-12 * (1.0 + d.objective.abs()));
    }
}

#[test]
fn heavy_ridge_penalty_reaches_fixed_effect() {
    let studies = (0..3)
        .map(|j| simple_study(&format!("s{j}"), 20, 1.0, vec![j as f64, 1.0 - j as f64], Matrix::identity(2).scale(4.0)))
        .collect();
    let prob = MetaProblem::new(studies).unwrap();
    let fe = fixed_effect(&prob).unwrap();
    let fit = ridge_fit(&prob, 1e9).unwrap();
    for j in 0..3 {
        for l in 0..2 {
            assert!((fit.beta_r[j * 2 + l] - fe[l]).abs() < 1e-4);
        }
    }
    assert_eq!(ridge_fit(&prob, 0.0).unwrap().beta_r, prob.beta_tilde());
}

#[test]
fn c_star_matches_worked_instance() {
    let prob = ham_core::model::scalar_problem(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
    let ones = ShrinkageVector::constant(2, 1.0).unwrap();
    assert!((c_star(&prob, &ones, &[1.0, 3.0]).unwrap().value - 3.0 / 19.0).abs() < 1e-14);
}
