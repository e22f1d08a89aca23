use thiserror::Error;

/// Everything that can go wrong in the numerics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("form degree k = {k} exceeds ambient dimension n = {n}")]
    DegreeTooLarge { k: usize, n: usize },
    #[error("expected {expected} vectors, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("vectors are linearly dependent (relative volume {0:e})")]
    DependentVectors(f64),
    #[error("basis is not unimodular: |det| = {0}")]
    NotUnimodular(f64),
    #[error("numeric overflow in {0}")]
    Overflow(&'static str),
    #[error("two evaluation routes disagree in {what}: {a} vs {b}")]
    RouteMismatch { what: &'static str, a: f64, b: f64 },
    #[error("objective returned NaN")]
    NonFiniteObjective,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("chart does not parametrize the slice: residual {residual:e} at x = {x:?}")]
    ChartInconsistent { residual: f64, x: Vec<f64> },
    #[error("degenerate slice: |d_y pi| = {norm:e} at x = {x:?}, y = {y:?}")]
    DegenerateSlice { norm: f64, x: Vec<f64>, y: Vec<f64> },
    #[error("Newton solve failed to converge on the slice at x = {x:?}")]
    NewtonFailed { x: Vec<f64> },
    #[error("scaling condition violated: slack n - s - sum k q/p = {slack}")]
    ScalingViolated { slack: f64 },
    #[error("problem is rank deficient: {0}")]
    RankDeficient(String),
    #[error("extrapolation ladder is not Cauchy: {0}")]
    NonCauchy(String),
    #[error("atoms do not span R^n")]
    NonSpanning,
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
