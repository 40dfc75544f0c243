//! Centroid-shrinkage meta-analysis of linear regression studies.
//!
//! Each study contributes the least-squares estimate of `p` shared
//! coefficients together with its precision `W_j`. Estimates are pulled
//! toward a precision-weighted centroid by per-study weights `pi_j ∈ [0, 1]`,
//! and the weights are chosen by minimizing an estimate of the mean squared
//! error. Everything here works from summary statistics and needs only
//! `alloc`.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod model;
pub(crate) mod num;
pub mod optimize;
pub mod risk;
pub mod selection;

pub use error::{HamError, Result};
pub use estimators::{HamFit, RidgeFit};
pub use inference::{IntervalRow, IntervalTable};
pub use linalg::Matrix;
pub use model::{MetaProblem, RayScale, ShrinkageVector, StudySummary};
pub use risk::{PseudoSign, RiskTerms};
pub use selection::{Criterion, SelectionDiagnostics, SelectionOptions};
