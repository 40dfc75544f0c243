//! Synthetic multi-site corpus for exercising `fit` and `compare`.
//!
//! Twenty-nine sites with a log-length-of-stay style outcome and seven
//! shared covariates on their natural scales. Most sites scatter tightly
//! around common coefficients; four sites deviate strongly, so borrowing
//! should be uneven.

use ham_core::model::{summarize_raw_study, SigmaConvention};
use ham_core::{Matrix, MetaProblem, StudySummary};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::rng::{stream, tag};

pub const SITES: usize = 29;
pub const OUTLIER_SITES: usize = 4;

pub const COVARIATES: [&str; 7] = [
    "(intercept)",
    "gender",
    "admitted_from_ed",
    "severity_score",
    "age",
    "diastolic_bp",
    "systolic_bp",
];

/// Coefficients per standard deviation of each continuous covariate.
const CENTRE: [f64; 7] = [0.52, 0.03, -0.09, 0.36, -0.07, 0.04, -0.04];
/// Mean and SD of the continuous covariates (severity, age, diastolic, systolic).
const CONTINUOUS: [(f64, f64); 4] = [(55.0, 25.0), (62.0, 16.0), (70.0, 15.0), (125.0, 22.0)];

#[derive(Clone, Debug)]
pub struct Site {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Coefficients on the natural scale.
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sites: Vec<Site>,
    pub problem: MetaProblem,
    pub names: Vec<String>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn site(rng: &mut ChaCha8Rng, outlier: bool) -> Site {
    let n = rng.random_range(100..=1200usize);
    let tau = if outlier { 0.12 } else { 0.02 };
    let mut x = Matrix::zeros(n, 7);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = f64::from(rng.random_bool(0.46));
        x[(i, 2)] = f64::from(rng.random_bool(0.4));
        for (c, (m, s)) in CONTINUOUS.iter().enumerate() {
            x[(i, 3 + c)] = m + s * normal(rng);
        }
    }
    let beta: Vec<f64> = CENTRE
        .iter()
        .enumerate()
        .map(|(l, c)| {
            let std_coef = c + tau * normal(rng);
            if l >= 3 {
                std_coef / CONTINUOUS[l - 3].1
            } else {
                std_coef
            }
        })
        .collect();
    let noise = Normal::new(0.0, 0.85).expect("positive sd");
    let mut y = x.matvec(&beta);
    // Shift so the intercept refers to covariates at their means.
    let offset: f64 = CONTINUOUS.iter().enumerate().map(|(c, (m, _))| beta[3 + c] * m).sum();
    for v in &mut y {
        *v += noise.sample(rng) - offset;
    }
    let mut beta = beta;
    beta[0] -= offset;
    Site { x, y, beta }
}

pub fn corpus(seed: u64) -> Corpus {
    let mut sites = Vec::with_capacity(SITES);
    for j in 0..SITES {
        let mut rng = stream(seed, tag("synthetic-corpus"), j as u64);
        sites.push(site(&mut rng, j >= SITES - OUTLIER_SITES));
    }
    let studies: Vec<StudySummary> = sites
        .iter()
        .enumerate()
        .map(|(j, s)| {
            summarize_raw_study(&format!("site{:02}", j + 1), &s.x, None, &s.y, Some(0), SigmaConvention::Mle)
                .expect("synthetic design has full rank")
        })
        .collect();
    Corpus {
        sites,
        problem: MetaProblem::new(studies).expect("valid summaries"),
        names: COVARIATES.iter().map(|s| s.to_string()).collect(),
    }
}
