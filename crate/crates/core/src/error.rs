//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("NaN encountered in {0}")]
    NaN(String),
    #[error("index {index} is on the boundary of a grid with {len} nodes")]
    BoundaryIndex { index: usize, len: usize },
    #[error("function is +inf at every node")]
    EmptyEffectiveDomain,
    #[error("function is not u-convex (max deviation {deviation:e})")]
    NotUConvex { deviation: f64 },
    #[error("unknown payoff family `{0}`")]
    UnknownFamily(String),
    #[error("cross partial g_xθ changes sign on the verification lattice (min {min:e}, max {max:e})")]
    MixedSign { min: f64, max: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("speed measure invalid: {0}")]
    InvalidMeasure(String),
    #[error("string has infinite mass next to 0")]
    DegenerateString,
    #[error("eigenfunction is not convex near x = {x}")]
    NotConvex { x: f64 },
    #[error("eigenfunction is not normalized: phi(0) = {phi0}")]
    NotNormalized { phi0: f64 },
    #[error("value curve is not convex at breakpoint {index}")]
    NonConvexInput { index: usize },
    #[error("states collide: x[{index}] = {left} is not below x[{next}] = {right}", next = index + 1)]
    CollidingStates { index: usize, left: f64, right: f64 },
    #[error("time step too coarse: sigma*sqrt(dt) = {step} exceeds 10% of the target {target}")]
    StepTooCoarse { step: f64, target: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse: {0}")]
    Parse(String),
}

/// Reject NaN at module boundaries.
pub fn check_finite_or_inf(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NaN(what.to_string()));
    }
    Ok(())
}
