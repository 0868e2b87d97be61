//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({0:.6}, {1:.6}) lies outside the chart domain")]
    Domain(f64, f64),
    #[error("metric is not positive definite at ({0:.6}, {1:.6})")]
    NotSpd(f64, f64),
    #[error("tangent vector is not g-unit: |g(w,w) - 1| = {0:.3e}")]
    NotUnit(f64),
    #[error("orbit left the domain near t = {t_exit:.8}")]
    LeftDomain { t_exit: f64 },
    #[error("boundary crossing could not be bracketed (grazing orbit)")]
    EventNotBracketed,
    #[error("orbit escaped before the requested horizon, at t = {0:.6}")]
    NotTrapped(f64),
    #[error(
        "shooting found no bracket for target exit parameter {target:.6} \
         (trapped/unreached wedge near theta in [{wedge_lo:.6}, {wedge_hi:.6}])"
    )]
    NoBracket { target: f64, wedge_lo: f64, wedge_hi: f64 },
    #[error("solver diverged: {0}")]
    SolverDiverged(String),
    #[error("shortening polyline stalled at the boundary")]
    StalledAtBoundary,
    #[error("metrics differ on the boundary: max |g1 - g2| = {0:.3e}")]
    BoundaryMismatch(f64),
    #[error("curvature sign violation: sampled K = {0:.6} >= 0")]
    CurvatureSignViolation(f64),
    #[error("transferred geodesics do not intersect within resolution")]
    NoIntersection,
    #[error("probe ray is trapped at the horizon")]
    ProbeTrapped,
    #[error("interval corners are not in circular order")]
    BadCornerOrder,
    #[error("homotopy class must be zero on a disk chart")]
    DiskClass,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
