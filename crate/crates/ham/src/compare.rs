//! Side-by-side fixed-effect, centroid, MLE and HAM inference.

use std::fmt::Write as _;

use ham_core::estimators::{fixed_effect, fixed_effect_covariance, mixing_matrix};
use ham_core::inference::{confidence_intervals, i_squared, interval_table, normal_quantile, two_sided_p, IntervalTable};
use ham_core::selection::{fit_ham, SelectionOptions};
use ham_core::{HamFit, Matrix, MetaProblem};

/// Estimate with a symmetric normal interval and two-sided p-value against 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
}

fn interval(estimate: f64, var: f64, z: f64) -> Interval {
    let se = var.max(0.0).sqrt();
    Interval {
        estimate,
        se,
        lower: estimate - z * se,
        upper: estimate + z * se,
        p_value: if se > 0.0 { two_sided_p(estimate / se) } else { f64::NAN },
    }
}

/// Counts of one covariate across studies, split by HAM and MLE significance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CrossTable {
    pub both: usize,
    pub ham_only: usize,
    pub mle_only: usize,
    pub neither: usize,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub names: Vec<String>,
    pub alpha: f64,
    pub fixed_effect: Vec<Interval>,
    /// Centroid at the selected weights, with variance from the MLE's distribution.
    pub centroid: Vec<Interval>,
    pub fit: HamFit,
    pub ham: IntervalTable,
    pub mle: IntervalTable,
    pub cross: Vec<CrossTable>,
    pub i_squared: Option<f64>,
}

pub const CENTROID_CAVEAT: &str = "The fixed-effect interval targets a parameter shared by all studies. \
The centroid interval targets the centroid at the selected weights, \
which need not coincide with any shared parameter.";

pub fn compare(problem: &MetaProblem, names: &[String], alpha: f64, opts: &SelectionOptions) -> ham_core::Result<CompareReport> {
    let p = problem.p();
    let z = normal_quantile(1.0 - alpha / 2.0);
    let fe = fixed_effect(problem)?;
    let fe_cov = fixed_effect_covariance(problem)?;
    let fixed = (0..p).map(|l| interval(fe[l], fe_cov[(l, l)], z)).collect();

    let fit = fit_ham(problem, opts)?;
    let centroid = match &fit.theta_hat {
        Some(theta) => {
            // theta = sum_i A_i beta_tilde_i, so Var(theta) = sum_i A_i V_i A_i'.
            let mix = mixing_matrix(problem, &fit.pi)?;
            let mut cov = Matrix::zeros(p, p);
            for (i, v) in problem.covariance_blocks().iter().enumerate() {
                let a = mix.a_block(i);
                cov = cov.add(&a.matmul(v).matmul(&a.transpose()));
            }
            (0..p).map(|l| interval(theta[l], cov[(l, l)], z)).collect()
        }
        None => Vec::new(),
    };

    let ids: Vec<String> = problem.studies().iter().map(|s| s.id.clone()).collect();
    let mle = interval_table(&ids, p, &problem.beta_tilde(), &problem.dense_mle_covariance(), alpha, None)?;
    let ham = confidence_intervals(&fit, alpha)?;
    let mut cross = vec![CrossTable::default(); p];
    for (h, m) in ham.rows.iter().zip(&mle.rows) {
        let c = &mut cross[h.covariate];
        match (h.significant.unwrap_or(false), m.significant.unwrap_or(false)) {
            (true, true) => c.both += 1,
            (true, false) => c.ham_only += 1,
            (false, true) => c.mle_only += 1,
            (false, false) => c.neither += 1,
        }
    }
    let i2 = if problem.k() >= 2 { Some(i_squared(problem)?) } else { None };
    Ok(CompareReport {
        names: names.to_vec(),
        alpha,
        fixed_effect: fixed,
        centroid,
        fit,
        ham,
        mle,
        cross,
        i_squared: i2,
    })
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn to_string(w: csv::Writer<Vec<u8>>) -> Result<String, csv::Error> {
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

impl CompareReport {
    fn name(&self, l: usize) -> &str {
        self.names.get(l).map_or("?", String::as_str)
    }

    /// Shared-parameter intervals, one row per covariate.
    pub fn meta_intervals_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "covariate", "fe_estimate", "fe_lower", "fe_upper", "centroid_estimate", "centroid_lower", "centroid_upper",
        ])?;
        for (l, fe) in self.fixed_effect.iter().enumerate() {
            let c = self.centroid.get(l);
            w.write_record([
                self.name(l).to_string(),
                f(fe.estimate),
                f(fe.lower),
                f(fe.upper),
                c.map_or_else(String::new, |c| f(c.estimate)),
                c.map_or_else(String::new, |c| f(c.lower)),
                c.map_or_else(String::new, |c| f(c.upper)),
            ])?;
        }
        to_string(w)
    }

    /// Per-study MLE and HAM estimates, intervals and p-values.
    pub fn study_intervals_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "study_id", "covariate", "pi", "mle_estimate", "mle_lower", "mle_upper", "mle_p_value", "ham_estimate",
            "ham_lower", "ham_upper", "ham_p_value",
        ])?;
        let p = self.fit.p;
        for (idx, (h, m)) in self.ham.rows.iter().zip(&self.mle.rows).enumerate() {
            let opt = |v: Option<f64>| v.map_or_else(String::new, f);
            w.write_record([
                h.study_id.clone(),
                self.name(h.covariate).to_string(),
                f(self.fit.pi.as_slice()[idx / p]),
                f(m.estimate),
                f(m.lower),
                f(m.upper),
                opt(m.p_value),
                f(h.estimate),
                f(h.lower),
                f(h.upper),
                opt(h.p_value),
            ])?;
        }
        to_string(w)
    }

    /// Significance cross-table against a null of zero.
    pub fn significance_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "covariate",
            "ham_sig_mle_sig",
            "ham_sig_mle_not",
            "ham_not_mle_sig",
            "ham_not_mle_not",
            "ham_significant",
            "mle_significant",
        ])?;
        for (l, c) in self.cross.iter().enumerate() {
            w.write_record([
                self.name(l).to_string(),
                c.both.to_string(),
                c.ham_only.to_string(),
                c.mle_only.to_string(),
                c.neither.to_string(),
                (c.both + c.ham_only).to_string(),
                (c.both + c.mle_only).to_string(),
            ])?;
        }
        to_string(w)
    }

    pub fn to_table(&self) -> String {
        let level = 100.0 * (1.0 - self.alpha);
        let width = self.names.iter().map(String::len).max().unwrap_or(9).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{level:.0}% intervals for shared quantities");
        let _ = writeln!(
            out,
            "{:<width$} {:>10} {:>10}   {:>10} {:>10}",
            "covariate", "FE lower", "FE upper", "centroid lo", "centroid up"
        );
        for (l, fe) in self.fixed_effect.iter().enumerate() {
            let (cl, cu) = self
                .centroid
                .get(l)
                .map_or((String::from("-"), String::from("-")), |c| (format!("{:.3}", c.lower), format!("{:.3}", c.upper)));
            let _ = writeln!(
                out,
                "{:<width$} {:>10.3} {:>10.3}   {:>10} {:>10}",
                self.name(l),
                fe.lower,
                fe.upper,
                cl,
                cu
            );
        }
        let _ = writeln!(out, "{CENTROID_CAVEAT}");
        let _ = writeln!(out);
        let _ = writeln!(out, "tests against 0 across {} studies at alpha = {}", self.fit.k(), self.alpha);
        let _ = writeln!(
            out,
            "{:<width$} {:>16} {:>16} {:>16} {:>16}",
            "covariate", "HAM sig/MLE sig", "HAM sig/MLE ns", "HAM ns/MLE sig", "HAM ns/MLE ns"
        );
        for (l, c) in self.cross.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<width$} {:>16} {:>16} {:>16} {:>16}",
                self.name(l),
                c.both,
                c.ham_only,
                c.mle_only,
                c.neither
            );
        }
        let pis = self.fit.pi.as_slice();
        let [q1, med, q3] = crate::sim::quartiles(pis);
        let _ = writeln!(out);
        let _ = writeln!(out, "selected pi: min {:.3}, quartiles {q1:.3} / {med:.3} / {q3:.3}, max {:.3}",
            pis.iter().copied().fold(f64::INFINITY, f64::min),
            pis.iter().copied().fold(0.0, f64::max));
        if let Some(i2) = self.i_squared {
            let _ = writeln!(out, "I^2 (descriptive): {:.1}%", 100.0 * i2);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ham_core::model::simple_study;

    #[test]
    fn homogeneous_studies_agree() {
        let studies = (0..4)
            .map(|j| {
                let g = Matrix::from_rows(&[[100.0, 10.0], [10.0, 80.0]]).unwrap();
                simple_study(&format!("s{j}"), 100, 1.0, vec![1.0 + 0.01 * j as f64, 2.0], g)
            })
            .collect();
        let problem = MetaProblem::new(studies).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = compare(&problem, &names, 0.05, &SelectionOptions::default()).unwrap();
        for l in 0..2 {
            assert!((r.fixed_effect[l].estimate - r.centroid[l].estimate).abs() < 0.02);
        }
        let total: usize = r.cross.iter().map(|c| c.both + c.ham_only + c.mle_only + c.neither).sum();
        assert_eq!(total, 8);
        assert!(r.to_table().contains("need not coincide"));
    }
}
