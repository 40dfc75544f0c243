use alloc::string::String;

pub type Result<T> = core::result::Result<T, HamError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HamError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("matrix is not positive definite (pivot {pivot:e})")]
    NotPositiveDefinite { pivot: f64 },
    #[error("study '{study}': {what} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    StudyNotPositiveDefinite {
        study: String,
        what: &'static str,
        min_eigenvalue: f64,
    },
    #[error("study '{study}': {what} is not symmetric")]
    NotSymmetric { study: String, what: &'static str },
    #[error("singular matrix: {what}")]
    Singular { what: &'static str },
    #[error("study '{study}': {message}")]
    InvalidStudy { study: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shrinkage vector has a component outside [0, 1]: pi[{index}] = {value}")]
    ShrinkageOutOfRange { index: usize, value: f64 },
    #[error("all shrinkage parameters are zero; no centroid is defined")]
    NoCentroid,
    #[error("penalty weight diverges at pi[{index}] = 1")]
    InfinitePenalty { index: usize },
    #[error("ray with a single active study reproduces the MLE; no optimal scale exists")]
    DegenerateRay,
    #[error("at least {needed} studies are required, found {found}")]
    TooFewStudies { needed: usize, found: usize },
    #[error("raw design is rank deficient")]
    RankDeficient,
    #[error("true coefficients are required for this quantity")]
    MissingTruth,
}
