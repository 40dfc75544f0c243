//! Input documents and output artifacts.
//!
//! Two input shapes are accepted. A summary document lists per-study
//! sufficient statistics under `studies`; a raw manifest lists per-study CSV
//! files under `raw` and is reduced to summaries by least squares.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ham_core::inference::IntervalTable;
use ham_core::model::{
    precision_from_covariance, projected_gram_from_blocks, summarize_raw_study, SigmaConvention,
};
use ham_core::{Matrix, MetaProblem, StudySummary};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed input document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("study '{study}': {message}")]
    Study { study: String, message: String },
    #[error(transparent)]
    Model(#[from] ham_core::HamError),
    #[error("input document needs exactly one of `studies` or `raw`")]
    Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramBlocks {
    pub xx: Vec<Vec<f64>>,
    pub xz: Vec<Vec<f64>>,
    pub zz: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDoc {
    pub id: String,
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub sigma2: f64,
    pub beta_tilde: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_proj: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_blocks: Option<GramBlocks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_full: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_sds: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaDenominator {
    #[default]
    N,
    NMinusQ,
}

impl From<SigmaDenominator> for SigmaConvention {
    fn from(d: SigmaDenominator) -> Self {
        match d {
            SigmaDenominator::N => SigmaConvention::Mle,
            SigmaDenominator::NMinusQ => SigmaConvention::Unbiased,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStudy {
    pub id: String,
    /// CSV file with a header row; relative paths resolve against the manifest.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawManifest {
    pub outcome: String,
    /// Columns shared across studies, in coefficient order.
    pub shared: Vec<String>,
    #[serde(default)]
    pub nuisance: Vec<String>,
    /// Prepend a column of ones as shared covariate 0.
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub sigma2_denominator: SigmaDenominator,
    pub studies: Vec<RawStudy>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub studies: Option<Vec<StudyDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawManifest>,
    /// Covariate names used in reports; defaults to `x0, x1, ...`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_names: Option<Vec<String>>,
}

fn matrix(study: &str, what: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<Matrix, InputError> {
    let err = |message: String| InputError::Study {
        study: study.to_string(),
        message,
    };
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        let found_c = rows.first().map_or(0, Vec::len);
        return Err(err(format!("{what} must be {r}x{c}, found {}x{}", rows.len(), found_c)));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(err(format!("{what} contains a non-finite value")));
    }
    if r == 0 || c == 0 {
        return Ok(Matrix::zeros(r, c));
    }
    Ok(Matrix::from_rows(rows)?)
}

impl StudyDoc {
    pub fn to_summary(&self) -> Result<StudySummary, InputError> {
        let id = self.id.as_str();
        let err = |message: String| InputError::Study {
            study: id.to_string(),
            message,
        };
        let given = [self.gram_proj.is_some(), self.gram_blocks.is_some(), self.cov_full.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(err("exactly one of gram_proj, gram_blocks, cov_full is required".into()));
        }
        if self.q < self.p {
            return Err(err(format!("q = {} is smaller than p = {}", self.q, self.p)));
        }
        let (p, m) = (self.p, self.q - self.p);
        let gram = if let Some(g) = &self.gram_proj {
            matrix(id, "gram_proj", g, p, p)?
        } else if let Some(b) = &self.gram_blocks {
            let xx = matrix(id, "gram_blocks.xx", &b.xx, p, p)?;
            if m == 0 {
                xx
            } else {
                let xz = matrix(id, "gram_blocks.xz", &b.xz, p, m)?;
                let zz = matrix(id, "gram_blocks.zz", &b.zz, m, m)?;
                projected_gram_from_blocks(&xx, &xz, &zz).map_err(|e| err(e.to_string()))?
            }
        } else {
            let cov = matrix(id, "cov_full", self.cov_full.as_ref().expect("checked"), self.q, self.q)?;
            precision_from_covariance(&cov, p, self.sigma2).map_err(|e| err(e.to_string()))?
        };
        let summary = StudySummary {
            id: self.id.clone(),
            p,
            q: self.q,
            n: self.n,
            sigma2: self.sigma2,
            beta_tilde: self.beta_tilde.clone(),
            gram_proj: gram,
            covariate_sds: self.covariate_sds.clone(),
            intercept_index: self.intercept_index,
            rss: None,
        };
        summary.validate()?;
        Ok(summary)
    }

    pub fn from_summary(s: &StudySummary) -> Self {
        Self {
            id: s.id.clone(),
            p: s.p,
            q: s.q,
            n: s.n,
            sigma2: s.sigma2,
            beta_tilde: s.beta_tilde.clone(),
            gram_proj: Some(s.gram_proj.to_rows()),
            gram_blocks: None,
            cov_full: None,
            covariate_sds: s.covariate_sds.clone(),
            intercept_index: s.intercept_index,
        }
    }
}

/// A parsed input together with the covariate names used in reports.
#[derive(Clone, Debug)]
pub struct LoadedInput {
    pub problem: MetaProblem,
    pub covariate_names: Vec<String>,
}

/// Parses a summary document or raw manifest. `base` resolves relative CSV paths.
pub fn parse_input(text: &str, base: &Path) -> Result<LoadedInput, InputError> {
    let doc: InputDoc = serde_json::from_str(text)?;
    let (studies, default_names) = match (&doc.studies, &doc.raw) {
        (Some(list), None) => {
            let studies = list.iter().map(StudyDoc::to_summary).collect::<Result<Vec<_>, _>>()?;
            let p = studies.first().map_or(0, |s| s.p);
            (studies, (0..p).map(|l| format!("x{l}")).collect::<Vec<_>>())
        }
        (None, Some(raw)) => {
            let mut names = Vec::new();
            if raw.intercept {
                names.push("(intercept)".to_string());
            }
            names.extend(raw.shared.iter().cloned());
            (load_raw(raw, base)?, names)
        }
        _ => return Err(InputError::Shape),
    };
    let problem = MetaProblem::new(studies)?;
    let covariate_names = match doc.covariate_names {
        Some(n) if n.len() == problem.p() => n,
        Some(n) => {
            return Err(InputError::Study {
                study: "(document)".into(),
                message: format!("covariate_names has {} entries, p = {}", n.len(), problem.p()),
            })
        }
        None => default_names,
    };
    Ok(LoadedInput {
        problem,
        covariate_names,
    })
}

pub fn load_input(path: &Path) -> Result<LoadedInput, InputError> {
    let text = fs::read_to_string(path).map_err(|source| InputError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_input(&text, path.parent().unwrap_or(Path::new(".")))
}

fn load_raw(raw: &RawManifest, base: &Path) -> Result<Vec<StudySummary>, InputError> {
    raw.studies
        .iter()
        .map(|s| {
            let path = if s.path.is_absolute() { s.path.clone() } else { base.join(&s.path) };
            let columns = read_columns(&path)?;
            let col = |name: &str| {
                columns.get(name).cloned().ok_or_else(|| InputError::Csv {
                    path: path.clone(),
                    message: format!("missing column '{name}'"),
                })
            };
            let y = col(&raw.outcome)?;
            let n = y.len();
            let mut shared: Vec<Vec<f64>> = Vec::new();
            if raw.intercept {
                shared.push(vec![1.0; n]);
            }
            for name in &raw.shared {
                shared.push(col(name)?);
            }
            let nuisance = raw.nuisance.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
            let x = Matrix::from_columns(&shared)?;
            let z = if nuisance.is_empty() {
                None
            } else {
                Some(Matrix::from_columns(&nuisance)?)
            };
            summarize_raw_study(
                &s.id,
                &x,
                z.as_ref(),
                &y,
                raw.intercept.then_some(0),
                raw.sigma2_denominator.into(),
            )
            .map_err(|e| InputError::Study {
                study: s.id.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a headed numeric CSV into named columns.
fn read_columns(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, InputError> {
    let bad = |message: String| InputError::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: '{}' is not a number", line + 2, field)))?;
            cols[c].push(v);
        }
    }
    Ok(headers.into_iter().zip(cols).collect())
}

pub fn write_problem_json(problem: &MetaProblem, names: Option<&[String]>) -> String {
    let doc = InputDoc {
        studies: Some(problem.studies().iter().map(StudyDoc::from_summary).collect()),
        raw: None,
        covariate_names: names.map(<[String]>::to_vec),
    };
    serde_json::to_string_pretty(&doc).expect("plain data serializes")
}

fn fmt(v: f64) -> String {
    format!("{v:.10}")
}

/// `study_id, covariate, estimate, se, lower, upper, p_value, significant`.
pub fn intervals_csv(table: &IntervalTable, names: &[String]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["study_id", "covariate", "estimate", "se", "lower", "upper", "p_value", "significant"])?;
    for r in &table.rows {
        w.write_record([
            r.study_id.clone(),
            names.get(r.covariate).cloned().unwrap_or_else(|| r.covariate.to_string()),
            fmt(r.estimate),
            fmt(r.se),
            fmt(r.lower),
            fmt(r.upper),
            r.p_value.map_or_else(String::new, fmt),
            r.significant.map_or_else(String::new, |s| s.to_string()),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

/// One fitted coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    pub study_id: String,
    pub covariate: usize,
    pub estimate: f64,
    pub pi: Option<f64>,
    pub centroid: Option<f64>,
}

pub fn fit_csv(rows: &[FitRow], names: &[String]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["study_id", "covariate", "estimate", "pi", "centroid"])?;
    for r in rows {
        w.write_record([
            r.study_id.clone(),
            names.get(r.covariate).cloned().unwrap_or_else(|| r.covariate.to_string()),
            fmt(r.estimate),
            r.pi.map_or_else(String::new, fmt),
            r.centroid.map_or_else(String::new, fmt),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(extra: &str) -> String {
        format!(r#"{{"studies": [{{"id": "a", "p": 1, "q": 1, "n": 10, "sigma2": 1.0, "beta_tilde": [2.0]{extra}}}]}}"#)
    }

    #[test]
    fn single_study_document() {
        let got = parse_input(&doc(r#", "gram_proj": [[5.0]]"#), Path::new(".")).unwrap();
        assert_eq!(got.problem.k(), 1);
        assert_eq!(got.problem.precision_blocks()[0][(0, 0)], 5.0);
    }

    #[test]
    fn gram_source_must_be_unique() {
        assert!(parse_input(&doc(""), Path::new(".")).is_err());
        let two = doc(r#", "gram_proj": [[5.0]], "cov_full": [[0.2]]"#);
        assert!(parse_input(&two, Path::new(".")).is_err());
    }

    #[test]
    fn indefinite_gram_names_study_and_eigenvalue() {
        let text = r#"{"studies": [{"id": "bad", "p": 2, "q": 2, "n": 10, "sigma2": 1.0,
            "beta_tilde": [0.0, 0.0], "gram_proj": [[1.0, 2.0], [2.0, 1.0]]}]}"#;
        let msg = parse_input(text, Path::new(".")).unwrap_err().to_string();
        assert!(msg.contains("bad"), "{msg}");
        assert!(msg.contains("-1"), "{msg}");
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let text = r#"{"studies": [
            {"id": "a", "p": 1, "q": 1, "n": 10, "sigma2": 1.0, "beta_tilde": [1.0], "gram_proj": [[2.0]]},
            {"id": "b", "p": 2, "q": 2, "n": 10, "sigma2": 1.0, "beta_tilde": [1.0, 0.0], "gram_proj": [[2.0, 0.0], [0.0, 2.0]]}]}"#;
        assert!(parse_input(text, Path::new(".")).is_err());
    }

    #[test]
    fn cov_full_and_blocks_agree() {
        // X'X = [[4, 1], [1, 3]] with one nuisance column, Z'Z = 2, X'Z = (1, 0.5)'.
        let blocks = r#"{"studies": [{"id": "a", "p": 2, "q": 3, "n": 20, "sigma2": 2.0, "beta_tilde": [1.0, 1.0],
            "gram_blocks": {"xx": [[4.0, 1.0], [1.0, 3.0]], "xz": [[1.0], [0.5]], "zz": [[2.0]]}}]}"#;
        let a = parse_input(blocks, Path::new(".")).unwrap();
        let full = Matrix::from_rows(&[[4.0, 1.0, 1.0], [1.0, 3.0, 0.5], [1.0, 0.5, 2.0]]).unwrap();
        let cov = full.spd_inverse().unwrap().scale(2.0);
        let text = serde_json::json!({"studies": [{"id": "a", "p": 2, "q": 3, "n": 20, "sigma2": 2.0,
            "beta_tilde": [1.0, 1.0], "cov_full": cov.to_rows()}]})
        .to_string();
        let b = parse_input(&text, Path::new(".")).unwrap();
        let (ga, gb) = (&a.problem.studies()[0].gram_proj, &b.problem.studies()[0].gram_proj);
        assert!(ga.sub(gb).max_abs() < 1e-10);
        assert!((ga[(0, 0)] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn summary_round_trip() {
        let a = parse_input(&doc(r#", "gram_proj": [[5.0]]"#), Path::new(".")).unwrap();
        let text = write_problem_json(&a.problem, None);
        let b = parse_input(&text, Path::new(".")).unwrap();
        assert_eq!(a.problem.studies(), b.problem.studies());
    }
}
