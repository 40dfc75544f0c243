//! Monte-Carlo harness: data-generating cells, estimator runs and
//! aggregation into eMSE, coverage and selection summaries.

use std::fmt::Write as _;
use std::time::Instant;

use ham_core::estimators::{fixed_effect, fixed_effect_covariance, ridge_fit};
use ham_core::inference::normal_quantile;
use ham_core::model::{standardize, summarize_raw_study, SigmaConvention, StandardizeMode};
use ham_core::risk::{true_mse, PseudoSign};
use ham_core::selection::{fit_at, select_lambda_ridge, select_pi, Criterion, SelectionOptions};
use ham_core::{Matrix, MetaProblem, StudySummary};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, tag, FROZEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Heterogeneity {
    None,
    Mild,
    Moderate,
    Mixture,
}

impl Heterogeneity {
    pub const ALL: [Heterogeneity; 4] = [Self::None, Self::Mild, Self::Moderate, Self::Mixture];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Mixture => "mixture",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Spread {
    /// Every study drawn around 3.47.
    Single,
    /// Five studies near 0 and fifteen near 3.47.
    Two,
}

/// Covariate location/scale scenarios for the population-heterogeneity setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    I,
    Ii,
    Iii,
    Iv,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Self::I, Self::Ii, Self::Iii, Self::Iv];

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "i",
            Self::Ii => "ii",
            Self::Iii => "iii",
            Self::Iv => "iv",
        }
    }

    /// Covariate means and error variances of the three studies.
    pub fn mu_sigma2(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Self::I => ([0.0; 3], [1.0; 3]),
            Self::Ii => ([10.0; 3], [100.0; 3]),
            Self::Iii => ([0.0, 1.0, 2.0], [1.0, 1.0, 4.0]),
            Self::Iv => ([0.0, 5.0, 10.0], [1.0, 25.0, 100.0]),
        }
    }
}

/// One data-generating configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "kebab-case")]
pub enum CellSpec {
    /// Three studies, fixed coefficients, sample sizes and dimension vary.
    Setting1 { n: [usize; 3], p: usize },
    /// `k` studies of 200 with coefficients redrawn every replicate.
    Setting2 { k: usize, heterogeneity: Heterogeneity },
    /// Twenty studies sharing only the intercept, three nuisance covariates each.
    Setting3 { spread: Spread },
    /// Three studies whose covariate scale differs.
    Setting4 { scenario: Scenario, n: usize },
    /// Fixed designs and coefficients; only the errors are redrawn.
    SelectionStudy { n: [usize; 3] },
    /// User-supplied coefficients with the standard covariate recipe.
    Custom { n: Vec<usize>, beta: Vec<Vec<f64>>, sigma2: Vec<f64> },
}

/// Setting-1 coefficients by dimension, one row per covariate, one column per study.
fn setting1_beta(p: usize) -> Option<Vec<[f64; 3]>> {
    let rows: &[[f64; 3]] = match p {
        2 => &[[3.53, 3.37, 3.27], [4.50, 4.49, 4.52]],
        4 => &[[3.37, 3.18, 3.59], [4.49, 4.53, 4.30], [2.17, 2.16, 2.41], [0.14, -0.13, 0.26]],
        10 => &[
            [3.26, 3.24, 3.42],
            [4.26, 4.24, 4.36],
            [2.48, 2.09, 2.30],
            [-0.08, 0.18, 0.05],
            [-0.92, -1.18, -0.85],
            [0.15, 0.22, -0.01],
            [-2.97, -2.93, -2.95],
            [0.46, 0.43, 0.46],
            [-4.49, -4.64, -4.52],
            [0.66, 0.65, 0.69],
        ],
        20 => &[
            [3.24, 3.23, 3.17],
            [4.24, 4.69, 4.74],
            [2.09, 2.52, 2.06],
            [0.18, 0.08, 0.10],
            [-1.18, -1.13, -0.89],
            [0.22, 0.06, 0.23],
            [-2.93, -2.80, -2.63],
            [0.43, 0.68, 0.37],
            [-4.64, -4.61, -4.60],
            [0.65, 0.77, 1.06],
            [-3.07, -3.21, -3.22],
            [-4.82, -4.55, -4.85],
            [3.44, 3.30, 3.40],
            [-3.87, -3.68, -3.98],
            [2.07, 1.68, 2.01],
            [3.13, 3.09, 3.37],
            [-2.40, -2.31, -2.35],
            [-2.61, -2.49, -2.61],
            [3.12, 3.12, 3.07],
            [-3.70, -3.50, -3.49],
        ],
        _ => return None,
    };
    Some(rows.to_vec())
}

/// Shared mean of the study coefficients in the settings that draw them
/// around a common centre.
pub const BETA_MEAN: [f64; 4] = [3.47, 4.50, 2.25, 0.10];

pub const SETTING1_N: [[usize; 3]; 10] = [
    [100, 100, 100],
    [100, 200, 100],
    [100, 200, 200],
    [100, 300, 100],
    [100, 300, 200],
    [100, 300, 300],
    [200, 200, 200],
    [200, 300, 200],
    [200, 300, 300],
    [300, 300, 300],
];

pub const SETTING4_N: [usize; 5] = [20, 50, 100, 200, 500];

pub const SELECTION_STUDY_N: [[usize; 3]; 4] = [[100, 100, 100], [100, 100, 500], [100, 500, 500], [500, 500, 500]];

fn fmt_n(n: &[usize]) -> String {
    n.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl CellSpec {
    pub fn label(&self) -> String {
        match self {
            CellSpec::Setting1 { n, p } => format!("s1/n={}/p={}", fmt_n(n), p),
            CellSpec::Setting2 { k, heterogeneity } => format!("s2/k={}/{}", k, heterogeneity.name()),
            CellSpec::Setting3 { spread } => format!(
                "s3/{}",
                match spread {
                    Spread::Single => "single",
                    Spread::Two => "two",
                }
            ),
            CellSpec::Setting4 { scenario, n } => format!("s4/{}/n={}", scenario.name(), n),
            CellSpec::SelectionStudy { n } => format!("sel/n={}", fmt_n(n)),
            CellSpec::Custom { n, .. } => format!("custom/n={}", fmt_n(n)),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            CellSpec::Setting1 { n, p } => {
                if setting1_beta(*p).is_none() {
                    return Err(format!("setting 1 supports p in {{2, 4, 10, 20}}, got {p}"));
                }
                if n.iter().any(|v| *v <= p + 1) {
                    return Err(format!("setting 1 needs n > p + 1 in every study, got {}", fmt_n(n)));
                }
            }
            CellSpec::Setting2 { k, .. } => {
                if *k < 4 {
                    return Err(format!("setting 2 needs k >= 4 so the mixture has heterogeneous studies, got {k}"));
                }
            }
            CellSpec::Setting3 { .. } => {}
            CellSpec::Setting4 { n, .. } => {
                if *n < 6 {
                    return Err(format!("setting 4 needs n >= 6, got {n}"));
                }
            }
            CellSpec::SelectionStudy { n } => {
                if n.iter().any(|v| *v < 6) {
                    return Err("selection-study cells need n >= 6".into());
                }
            }
            CellSpec::Custom { n, beta, sigma2 } => {
                if n.is_empty() || n.len() != beta.len() || n.len() != sigma2.len() {
                    return Err("custom cell needs matching n, beta and sigma2 lists".into());
                }
                let p = beta[0].len();
                if p == 0 || p > 20 || beta.iter().any(|b| b.len() != p) {
                    return Err("custom cell needs 1 <= p <= 20 coefficients in every study".into());
                }
                if n.iter().any(|v| *v <= p + 1) || sigma2.iter().any(|s| !(*s > 0.0)) {
                    return Err("custom cell needs n > p + 1 and positive sigma2".into());
                }
            }
        }
        Ok(())
    }

    /// Tag under which frozen draws are keyed; cells sharing it share parameters.
    fn frozen_tag(&self) -> u64 {
        match self {
            CellSpec::Setting3 { spread } => tag(&format!("s3-frozen/{:?}", spread)),
            CellSpec::Setting4 { .. } => tag("s4-frozen"),
            CellSpec::SelectionStudy { .. } => tag("sel-frozen"),
            other => tag(&other.label()),
        }
    }
}

/// Every cell of a setting, in table order.
pub fn setting_cells(setting: u8) -> Vec<CellSpec> {
    match setting {
        1 => [2, 4, 10, 20]
            .iter()
            .flat_map(|&p| SETTING1_N.iter().map(move |n| CellSpec::Setting1 { n: *n, p }))
            .collect(),
        2 => Heterogeneity::ALL
            .iter()
            .flat_map(|&h| [5, 10, 15].map(|k| CellSpec::Setting2 { k, heterogeneity: h }))
            .collect(),
        3 => vec![
            CellSpec::Setting3 { spread: Spread::Single },
            CellSpec::Setting3 { spread: Spread::Two },
        ],
        4 => Scenario::ALL
            .iter()
            .flat_map(|&s| SETTING4_N.map(|n| CellSpec::Setting4 { scenario: s, n }))
            .collect(),
        _ => SELECTION_STUDY_N.iter().map(|n| CellSpec::SelectionStudy { n: *n }).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Mle,
    Fe,
    Ham,
    Ridge,
    HamTrueMse,
    HamUmse,
    HamBmse,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mle => "mle",
            Self::Fe => "fe",
            Self::Ham => "ham",
            Self::Ridge => "ridge",
            Self::HamTrueMse => "ham-true-mse",
            Self::HamUmse => "ham-umse",
            Self::HamBmse => "ham-bmse",
        }
    }
}

/// Knobs forwarded to shrinkage selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    /// Use the flipped correction sign in the pseudo-MSE.
    pub flipped_pseudo_sign: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let d = SelectionOptions::default();
        Self {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            restarts: d.restarts,
            flipped_pseudo_sign: false,
        }
    }
}

impl SelectionConfig {
    pub fn options(&self, criterion: Criterion, seed: u64) -> SelectionOptions {
        SelectionOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            restarts: self.restarts,
            seed: Some(seed),
            criterion,
            ..SelectionOptions::default()
        }
    }

    pub fn pseudo_sign(&self) -> PseudoSign {
        if self.flipped_pseudo_sign {
            PseudoSign::Flipped
        } else {
            PseudoSign::Corrected
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub cells: Vec<CellSpec>,
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub selection: SelectionConfig,
    /// Worker cap; `None` uses every core.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(cells: Vec<CellSpec>, replicates: usize, seed: u64) -> Self {
        Self {
            cells,
            replicates,
            alpha: 0.05,
            seed,
            estimators: vec![EstimatorKind::Mle, EstimatorKind::Ham, EstimatorKind::Ridge],
            standardize: false,
            selection: SelectionConfig::default(),
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.replicates == 0 {
            return Err("replicate count must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.cells.is_empty() {
            return Err("no cells selected".into());
        }
        if self.estimators.is_empty() {
            return Err("no estimators selected".into());
        }
        if self.threads == Some(0) {
            return Err("thread count must be positive".into());
        }
        if !(self.selection.tolerance > 0.0) || self.selection.max_iterations == 0 {
            return Err("selection tolerance and iteration limit must be positive".into());
        }
        for c in &self.cells {
            c.validate()?;
        }
        Ok(())
    }
}

/// One simulated data set with the truth needed to score it.
#[derive(Clone, Debug)]
pub struct Replicate {
    pub problem: MetaProblem,
    /// Stacked true coefficients.
    pub truth: Vec<f64>,
    pub true_sigma2: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_to(x: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    (x * f).round() / f
}

fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mag = x.abs().log10().floor() as i32;
    round_to(x, digits - 1 - mag)
}

/// Intercept, N(0, 1), Bernoulli(1/2), their interaction, then N(0, 1) extras.
fn standard_design(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut x = Matrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        if p > 1 {
            x[(i, 1)] = normal(rng);
        }
        if p > 2 {
            x[(i, 2)] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
        if p > 3 {
            x[(i, 3)] = x[(i, 1)] * x[(i, 2)];
        }
        for l in 4..p {
            x[(i, l)] = normal(rng);
        }
    }
    x
}

/// Intercept plus `p - 1` columns from N(mu, b²) with `b = 1` at `mu = 0`, else `b = mu`.
fn location_design(n: usize, p: usize, mu: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let b = if mu == 0.0 { 1.0 } else { mu };
    let mut x = Matrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for l in 1..p {
            x[(i, l)] = mu + b * normal(rng);
        }
    }
    x
}

fn gaussian_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut z = Matrix::zeros(n, m);
    for i in 0..n {
        for l in 0..m {
            z[(i, l)] = normal(rng);
        }
    }
    z
}

fn outcome(x: &Matrix, beta: &[f64], z: Option<(&Matrix, &[f64])>, sigma2: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut y = x.matvec(beta);
    if let Some((z, g)) = z {
        for (yi, zi) in y.iter_mut().zip(z.matvec(g)) {
            *yi += zi;
        }
    }
    let s = sigma2.sqrt();
    for yi in &mut y {
        *yi += s * normal(rng);
    }
    y
}

fn summarize(j: usize, x: &Matrix, z: Option<&Matrix>, y: &[f64]) -> Result<StudySummary, String> {
    summarize_raw_study(&format!("study{}", j + 1), x, z, y, Some(0), SigmaConvention::Mle)
        .map_err(|e| e.to_string())
}

/// Parameters frozen for a whole cell.
#[derive(Clone, Debug)]
struct Frozen {
    beta: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    designs: Vec<Matrix>,
}

const S3_K: usize = 20;
const S3_N: usize = 200;
const S3_NUISANCE: usize = 3;
const S4_P: usize = 4;
const K_SIGMA2: f64 = 0.25;

fn freeze(cell: &CellSpec, master: u64) -> Frozen {
    let mut rng = stream(master, cell.frozen_tag(), FROZEN);
    let mut out = Frozen {
        beta: Vec::new(),
        gamma: Vec::new(),
        designs: Vec::new(),
    };
    match cell {
        CellSpec::Setting1 { p, .. } => {
            let rows = setting1_beta(*p).expect("validated");
            out.beta = (0..3).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        }
        CellSpec::Setting2 { .. } => {}
        CellSpec::Setting3 { spread } => {
            for j in 0..S3_K {
                let centre = match spread {
                    Spread::Two if j < 5 => 0.0,
                    _ => BETA_MEAN[0],
                };
                out.beta.push(vec![round_to(centre + rng.random_range(-0.25..0.25), 2)]);
            }
            for _ in 0..S3_K {
                out.gamma.push((0..S3_NUISANCE).map(|_| round_to(normal(&mut rng), 2)).collect());
            }
        }
        CellSpec::Setting4 { .. } => {
            for _ in 0..3 {
                out.beta.push((0..S4_P).map(|_| round_to(rng.random_range(-0.25..0.25), 2)).collect());
            }
        }
        CellSpec::SelectionStudy { n } => {
            for _ in 0..3 {
                out.beta.push(
                    BETA_MEAN
                        .iter()
                        .map(|m| round_significant(m + 0.1f64.sqrt() * normal(&mut rng), 2))
                        .collect(),
                );
            }
            // Designs depend on the cell's sample sizes, so key them by cell.
            let mut drng = stream(master, tag(&cell.label()), FROZEN);
            out.designs = n.iter().map(|&nj| standard_design(nj, 4, &mut drng)).collect();
        }
        CellSpec::Custom { beta, .. } => out.beta = beta.clone(),
    }
    out
}

fn generate(cell: &CellSpec, frozen: &Frozen, rng: &mut ChaCha8Rng) -> Result<Replicate, String> {
    let mut studies = Vec::new();
    let mut truth = Vec::new();
    let mut true_sigma2 = Vec::new();
    match cell {
        CellSpec::Setting1 { n, p } => {
            for (j, &nj) in n.iter().enumerate() {
                let x = standard_design(nj, *p, rng);
                let y = outcome(&x, &frozen.beta[j], None, 1.0, rng);
                studies.push(summarize(j, &x, None, &y)?);
                truth.extend_from_slice(&frozen.beta[j]);
                true_sigma2.push(1.0);
            }
        }
        CellSpec::Setting2 { k, heterogeneity } => {
            for j in 0..*k {
                let var: f64 = match heterogeneity {
                    Heterogeneity::None => 0.0,
                    Heterogeneity::Mild => 0.1,
                    Heterogeneity::Moderate => 0.5,
                    Heterogeneity::Mixture => {
                        if j < 3 {
                            0.0
                        } else {
                            1.0
                        }
                    }
                };
                let beta: Vec<f64> = BETA_MEAN.iter().map(|m| m + var.sqrt() * normal(rng)).collect();
                let x = standard_design(200, 4, rng);
                let y = outcome(&x, &beta, None, 1.0, rng);
                studies.push(summarize(j, &x, None, &y)?);
                truth.extend_from_slice(&beta);
                true_sigma2.push(1.0);
            }
        }
        CellSpec::Setting3 { .. } => {
            for j in 0..S3_K {
                let x = Matrix::from_vec(S3_N, 1, vec![1.0; S3_N]).expect("column");
                let z = gaussian_matrix(S3_N, S3_NUISANCE, rng);
                let y = outcome(&x, &frozen.beta[j], Some((&z, &frozen.gamma[j])), 1.0, rng);
                studies.push(summarize(j, &x, Some(&z), &y)?);
                truth.extend_from_slice(&frozen.beta[j]);
                true_sigma2.push(1.0);
            }
        }
        CellSpec::Setting4 { scenario, n } => {
            let (mu, s2) = scenario.mu_sigma2();
            for j in 0..3 {
                let x = location_design(*n, S4_P, mu[j], rng);
                let y = outcome(&x, &frozen.beta[j], None, s2[j], rng);
                studies.push(summarize(j, &x, None, &y)?);
                truth.extend_from_slice(&frozen.beta[j]);
                true_sigma2.push(s2[j]);
            }
        }
        CellSpec::SelectionStudy { .. } => {
            for j in 0..3 {
                let x = &frozen.designs[j];
                let y = outcome(x, &frozen.beta[j], None, K_SIGMA2, rng);
                studies.push(summarize(j, x, None, &y)?);
                truth.extend_from_slice(&frozen.beta[j]);
                true_sigma2.push(K_SIGMA2);
            }
        }
        CellSpec::Custom { n, beta, sigma2 } => {
            for (j, &nj) in n.iter().enumerate() {
                let x = standard_design(nj, beta[j].len(), rng);
                let y = outcome(&x, &beta[j], None, sigma2[j], rng);
                studies.push(summarize(j, &x, None, &y)?);
                truth.extend_from_slice(&beta[j]);
                true_sigma2.push(sigma2[j]);
            }
        }
    }
    Ok(Replicate {
        problem: MetaProblem::new(studies).map_err(|e| e.to_string())?,
        truth,
        true_sigma2,
    })
}

/// Replicate `rep` of `cell`, exactly as the harness sees it.
pub fn replicate(cell: &CellSpec, master: u64, rep: u64) -> Result<Replicate, String> {
    cell.validate()?;
    let frozen = freeze(cell, master);
    generate(cell, &frozen, &mut stream(master, tag(&cell.label()), rep))
}

/// Per-replicate score of one estimator.
#[derive(Clone, Debug, PartialEq)]
struct Outcome {
    sq_err: f64,
    /// Fraction of each study's coordinates covered by the interval.
    covered: Option<Vec<f64>>,
    pi: Option<Vec<f64>>,
    /// Analytic MSE at the selected weights with the true variances.
    analytic: Option<f64>,
    analytic_mle: Option<f64>,
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn coverage(est: &[f64], se: &[f64], truth: &[f64], k: usize, p: usize, z: f64) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let hits = (j * p..(j + 1) * p)
                .filter(|&i| (est[i] - truth[i]).abs() <= z * se[i])
                .count();
            hits as f64 / p as f64
        })
        .collect()
}

fn diag_se(cov: &Matrix) -> Vec<f64> {
    cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
}

fn run_estimator(
    kind: EstimatorKind,
    problem: &MetaProblem,
    truth: &[f64],
    oracle: &MetaProblem,
    cfg: &SimConfig,
    z: f64,
    seed: u64,
) -> Result<Outcome, String> {
    let k = problem.k();
    let p = problem.p();
    let err = |e: ham_core::HamError| e.to_string();
    let ham_with = |criterion: Criterion, selection_problem: &MetaProblem| -> Result<Outcome, String> {
        let opts = cfg.selection.options(criterion, seed);
        let (pi, meta) = select_pi(selection_problem, &opts).map_err(err)?;
        // Selection may run on the oracle problem; estimates and intervals use the data.
        let fit = fit_at(problem, pi, meta).map_err(err)?;
        let se = diag_se(&fit.covariance);
        Ok(Outcome {
            sq_err: sq_err(&fit.beta_hat, truth),
            covered: Some(coverage(&fit.beta_hat, &se, truth, k, p, z)),
            analytic: Some(true_mse(oracle, &fit.pi, truth).map_err(err)?),
            analytic_mle: Some(oracle.trace_mle_covariance()),
            pi: Some(fit.pi.into_vec()),
        })
    };
    match kind {
        EstimatorKind::Mle => {
            let est = problem.beta_tilde();
            let se = diag_se(&problem.dense_mle_covariance());
            Ok(Outcome {
                sq_err: sq_err(&est, truth),
                covered: Some(coverage(&est, &se, truth, k, p, z)),
                pi: None,
                analytic: Some(oracle.trace_mle_covariance()),
                analytic_mle: Some(oracle.trace_mle_covariance()),
            })
        }
        EstimatorKind::Fe => {
            let theta = fixed_effect(problem).map_err(err)?;
            let cov = fixed_effect_covariance(problem).map_err(err)?;
            let est: Vec<f64> = (0..k).flat_map(|_| theta.iter().copied()).collect();
            let se: Vec<f64> = (0..k).flat_map(|_| diag_se(&cov)).collect();
            Ok(Outcome {
                sq_err: sq_err(&est, truth),
                covered: Some(coverage(&est, &se, truth, k, p, z)),
                pi: None,
                analytic: None,
                analytic_mle: None,
            })
        }
        EstimatorKind::Ridge => {
            let opts = cfg.selection.options(Criterion::Umse, seed);
            let (lambda, _) = select_lambda_ridge(problem, &opts).map_err(err)?;
            let fit = ridge_fit(problem, lambda).map_err(err)?;
            Ok(Outcome {
                sq_err: sq_err(&fit.beta_r, truth),
                covered: None,
                pi: None,
                analytic: None,
                analytic_mle: None,
            })
        }
        EstimatorKind::Ham => ham_with(Criterion::Pseudo(cfg.selection.pseudo_sign()), problem),
        EstimatorKind::HamUmse => ham_with(Criterion::Umse, problem),
        EstimatorKind::HamBmse => ham_with(Criterion::Bmse, problem),
        EstimatorKind::HamTrueMse => ham_with(Criterion::TrueMse(truth.to_vec()), oracle),
    }
}

/// Estimates from every configured estimator on one replicate.
fn evaluate(cell: &CellSpec, frozen: &Frozen, cfg: &SimConfig, rep: u64) -> Vec<Result<Outcome, String>> {
    let mut rng = stream(cfg.seed, tag(&cell.label()), rep);
    let data = match generate(cell, frozen, &mut rng) {
        Ok(d) => d,
        Err(e) => return cfg.estimators.iter().map(|_| Err(e.clone())).collect(),
    };
    let seed = rng.next_u64();
    let z = normal_quantile(1.0 - cfg.alpha / 2.0);
    let prepared = if cfg.standardize {
        standardize(&data.problem, StandardizeMode::PerStudy).map(|(prob, rec)| {
            let truth = rec.forward_estimates(&data.truth);
            (prob, truth)
        })
    } else {
        Ok((data.problem.clone(), data.truth.clone()))
    };
    let (problem, truth) = match prepared {
        Ok(v) => v,
        Err(e) => return cfg.estimators.iter().map(|_| Err(e.to_string())).collect(),
    };
    let oracle = match problem.with_sigma2(&data.true_sigma2) {
        Ok(o) => o,
        Err(e) => return cfg.estimators.iter().map(|_| Err(e.to_string())).collect(),
    };
    cfg.estimators
        .iter()
        .map(|&kind| run_estimator(kind, &problem, &truth, &oracle, cfg, z, seed))
        .collect()
}

/// Lower quartile, median and upper quartile (type-7 interpolation).
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    if values.is_empty() {
        return [f64::NAN; 3];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |t: f64| {
        let h = (v.len() - 1) as f64 * t;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    [q(0.25), q(0.5), q(0.75)]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub replicates_used: usize,
    pub excluded: usize,
    pub first_error: Option<String>,
    pub emse: f64,
    /// Per-study coverage in percent; empty when the estimator has no intervals.
    pub coverage_by_study: Vec<f64>,
    pub coverage: Option<f64>,
    /// Quartiles of the selected weight, per study.
    pub pi_quartiles: Vec<[f64; 3]>,
    /// Percent of replicates whose analytic MSE exceeds the MLE's.
    pub percent_loss: Option<f64>,
    pub median_analytic_mse: Option<f64>,
    pub median_ratio: Option<f64>,
    /// Selected weights by replicate, kept for plot data.
    #[serde(skip)]
    pub pi_draws: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellReport {
    pub label: String,
    pub cell: CellSpec,
    pub runtime_secs: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl CellReport {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub standardize: bool,
    pub cells: Vec<CellReport>,
}

impl SimReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(quartiles(values)[1])
    }
}

fn summarize_estimator(kind: EstimatorKind, outcomes: &[&Result<Outcome, String>]) -> EstimatorSummary {
    let ok: Vec<&Outcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let first_error = outcomes.iter().find_map(|o| o.as_ref().err().cloned());
    let used = ok.len();
    let mean = |f: &dyn Fn(&Outcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / used.max(1) as f64;
    let emse = if used == 0 { f64::NAN } else { mean(&|o| o.sq_err) };
    let k = ok.iter().find_map(|o| o.covered.as_ref().map(|c| c.len())).unwrap_or(0);
    let coverage_by_study: Vec<f64> = if ok.iter().all(|o| o.covered.is_some()) && used > 0 {
        (0..k)
            .map(|j| 100.0 * mean(&|o| o.covered.as_ref().expect("checked")[j]))
            .collect()
    } else {
        Vec::new()
    };
    let coverage = if coverage_by_study.is_empty() {
        None
    } else {
        Some(coverage_by_study.iter().sum::<f64>() / coverage_by_study.len() as f64)
    };
    let pi_draws: Vec<Vec<f64>> = ok.iter().filter_map(|o| o.pi.clone()).collect();
    let pi_quartiles = if pi_draws.is_empty() {
        Vec::new()
    } else {
        (0..pi_draws[0].len())
            .map(|j| quartiles(&pi_draws.iter().map(|v| v[j]).collect::<Vec<_>>()))
            .collect()
    };
    let pairs: Vec<(f64, f64)> = ok
        .iter()
        .filter_map(|o| Some((o.analytic?, o.analytic_mle?)))
        .collect();
    let (percent_loss, median_analytic_mse, median_ratio) = if pairs.is_empty() {
        (None, None, None)
    } else {
        let losses = pairs.iter().filter(|(a, m)| a > m).count();
        (
            Some(100.0 * losses as f64 / pairs.len() as f64),
            median(&pairs.iter().map(|(a, _)| *a).collect::<Vec<_>>()),
            median(&pairs.iter().map(|(a, m)| a / m).collect::<Vec<_>>()),
        )
    };
    EstimatorSummary {
        estimator: kind,
        replicates_used: used,
        excluded: outcomes.len() - used,
        first_error,
        emse,
        coverage_by_study,
        coverage,
        pi_quartiles,
        percent_loss,
        median_analytic_mse,
        median_ratio,
        pi_draws,
    }
}

/// Runs every configured cell and aggregates per estimator.
///
/// Replicates run in parallel and are collected in index order before any
/// reduction, so the report does not depend on the worker count.
pub fn run_cells(cfg: &SimConfig) -> Result<SimReport, String> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| e.to_string())?;
    let mut cells = Vec::with_capacity(cfg.cells.len());
    for cell in &cfg.cells {
        let start = Instant::now();
        let frozen = freeze(cell, cfg.seed);
        let results: Vec<Vec<Result<Outcome, String>>> = pool.install(|| {
            (0..cfg.replicates as u64)
                .into_par_iter()
                .map(|rep| evaluate(cell, &frozen, cfg, rep))
                .collect()
        });
        let estimators = cfg
            .estimators
            .iter()
            .enumerate()
            .map(|(e, &kind)| {
                let column: Vec<&Result<Outcome, String>> = results.iter().map(|r| &r[e]).collect();
                summarize_estimator(kind, &column)
            })
            .collect();
        cells.push(CellReport {
            label: cell.label(),
            cell: cell.clone(),
            runtime_secs: start.elapsed().as_secs_f64(),
            estimators,
        });
    }
    Ok(SimReport {
        replicates: cfg.replicates,
        seed: cfg.seed,
        alpha: cfg.alpha,
        standardize: cfg.standardize,
        cells,
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{:.*}", digits, x))
}

fn joined(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{:.*}", digits, x)).collect::<Vec<_>>().join(";")
}

impl SimReport {
    /// One row per cell × estimator. Runtime is left out so that repeated
    /// runs produce identical bytes; it appears in the text table instead.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "cell",
            "estimator",
            "replicates_used",
            "excluded",
            "emse",
            "emse_x100",
            "coverage_pct",
            "coverage_by_study_pct",
            "pi_median_by_study",
            "percent_loss",
            "median_analytic_mse",
            "median_ratio",
        ])?;
        for c in &self.cells {
            for e in &c.estimators {
                w.write_record([
                    c.label.clone(),
                    e.estimator.name().to_string(),
                    e.replicates_used.to_string(),
                    e.excluded.to_string(),
                    format!("{:.10e}", e.emse),
                    format!("{:.3}", 100.0 * e.emse),
                    opt(e.coverage, 2),
                    joined(&e.coverage_by_study, 2),
                    joined(&e.pi_quartiles.iter().map(|q| q[1]).collect::<Vec<_>>(), 4),
                    opt(e.percent_loss, 2),
                    opt(e.median_analytic_mse, 6),
                    opt(e.median_ratio, 4),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Long-format selected weights: one row per cell, estimator, replicate and study.
    pub fn plot_data_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "estimator", "replicate", "study", "pi"])?;
        for c in &self.cells {
            for e in &c.estimators {
                for (r, draw) in e.pi_draws.iter().enumerate() {
                    for (j, v) in draw.iter().enumerate() {
                        w.write_record([
                            c.label.clone(),
                            e.estimator.name().to_string(),
                            r.to_string(),
                            (j + 1).to_string(),
                            format!("{:.6}", v),
                        ])?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// eMSE ×100 per estimator and interval coverage, one line per cell.
    /// Runtime is optional so the file copy stays reproducible.
    pub fn to_table(&self, with_runtime: bool) -> String {
        let mut names: Vec<EstimatorKind> = Vec::new();
        for c in &self.cells {
            for e in &c.estimators {
                if !names.contains(&e.estimator) {
                    names.push(e.estimator);
                }
            }
        }
        let width = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "replicates = {}, seed = {}, alpha = {}, standardized = {}",
            self.replicates, self.seed, self.alpha, self.standardize
        );
        let _ = write!(out, "{:<width$}", "cell");
        for n in &names {
            let _ = write!(out, " {:>14}", format!("{} eMSEx100", n.name()));
        }
        for n in &names {
            if matches!(n, EstimatorKind::Ham | EstimatorKind::Mle) {
                let _ = write!(out, " {:>12}", format!("{} CR%", n.name()));
            }
        }
        if with_runtime {
            let _ = write!(out, " {:>9}", "secs");
        }
        let _ = writeln!(out);
        for c in &self.cells {
            let _ = write!(out, "{:<width$}", c.label);
            for n in &names {
                let v = c.get(*n).map_or(String::from("-"), |e| format!("{:.1}", 100.0 * e.emse));
                let _ = write!(out, " {:>14}", v);
            }
            for n in &names {
                if matches!(n, EstimatorKind::Ham | EstimatorKind::Mle) {
                    let v = c
                        .get(*n)
                        .and_then(|e| e.coverage)
                        .map_or(String::from("-"), |v| format!("{:.1}", v));
                    let _ = write!(out, " {:>12}", v);
                }
            }
            if with_runtime {
                let _ = write!(out, " {:>9.2}", c.runtime_secs);
            }
            let _ = writeln!(out);
        }
        let losses: Vec<&CellReport> = self
            .cells
            .iter()
            .filter(|c| c.estimators.iter().any(|e| e.percent_loss.is_some() && e.pi_quartiles.len() > 0))
            .collect();
        if !losses.is_empty() {
            let _ = writeln!(out, "\npercent of replicates with analytic MSE above the MLE:");
            for c in losses {
                let _ = write!(out, "{:<width$}", c.label);
                for e in &c.estimators {
                    if let (Some(pl), false) = (e.percent_loss, e.pi_quartiles.is_empty()) {
                        let _ = write!(out, "  {}={:.1}", e.estimator.name(), pl);
                    }
                }
                let _ = writeln!(out);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting1_values_match_table() {
        let f = freeze(&CellSpec::Setting1 { n: [100, 100, 100], p: 2 }, 1);
        assert_eq!(f.beta, vec![vec![3.53, 4.50], vec![3.37, 4.49], vec![3.27, 4.52]]);
        assert_eq!(setting1_beta(20).unwrap().len(), 20);
        assert!(setting1_beta(3).is_none());
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_to(0.23456, 2), 0.23);
        assert_eq!(round_significant(3.4567, 2), 3.5);
        assert_eq!(round_significant(-0.012345, 2), -0.012);
    }

    #[test]
    fn quartiles_of_small_sample() {
        assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0]), [2.0, 3.0, 4.0]);
    }

    #[test]
    fn homogeneous_replicate_has_equal_truth() {
        let cell = CellSpec::Setting2 { k: 5, heterogeneity: Heterogeneity::None };
        let r = replicate(&cell, 3, 0).unwrap();
        for j in 1..5 {
            assert_eq!(r.truth[j * 4..(j + 1) * 4], r.truth[..4]);
        }
    }

    #[test]
    fn overlapping_cell_shape() {
        let r = replicate(&CellSpec::Setting3 { spread: Spread::Two }, 3, 0).unwrap();
        assert_eq!((r.problem.k(), r.problem.p()), (20, 1));
        assert_eq!(r.problem.studies()[0].q, 1 + S3_NUISANCE);
        assert!(r.truth[..5].iter().all(|b| b.abs() <= 0.25));
        assert!(r.truth[5..].iter().all(|b| (b - 3.47).abs() <= 0.25));
    }

    #[test]
    fn frozen_designs_are_shared_across_replicates() {
        let cell = CellSpec::SelectionStudy { n: [100, 100, 100] };
        let a = replicate(&cell, 9, 0).unwrap();
        let b = replicate(&cell, 9, 1).unwrap();
        assert_eq!(a.problem.studies()[0].gram_proj, b.problem.studies()[0].gram_proj);
        assert_ne!(a.problem.beta_tilde(), b.problem.beta_tilde());
    }

    #[test]
    fn single_replicate_emse_is_its_error() {
        let cell = CellSpec::Setting1 { n: [100, 100, 100], p: 2 };
        let mut cfg = SimConfig::new(vec![cell.clone()], 1, 5);
        cfg.estimators = vec![EstimatorKind::Mle];
        let rep = run_cells(&cfg).unwrap();
        let r = replicate(&cell, 5, 0).unwrap();
        let e = sq_err(&r.problem.beta_tilde(), &r.truth);
        assert!((rep.cells[0].estimators[0].emse - e).abs() < 1e-15);
    }
}
