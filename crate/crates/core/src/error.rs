use thiserror::Error;

use crate::sim::SimulationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate tangent at s = {s}: |x_s'(s)| = {norm:e}")]
    DegenerateTangent { s: f64, norm: f64 },

    #[error("jacobian evaluation produced non-finite values: {0}")]
    MissingJacobian(String),

    #[error("projection ambiguous: grid minima at s = {first} and s = {second} are within 1% in distance")]
    ProjectionAmbiguous { first: f64, second: f64 },

    #[error("projection Newton iteration diverged after {iterations} iterations (last residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("focal point reached at s = {s}: projection denominator {denominator:e}")]
    FocalPointReached { s: f64, denominator: f64 },

    #[error("orbit parameter rate rho(s) = {rho} is not positive at s = {s}")]
    NonPositiveRate { s: f64, rho: f64 },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("periodic Riccati iteration did not converge after {sweeps} sweeps (periodicity gap {gap:e})")]
    NotConverged { sweeps: usize, gap: f64 },

    #[error("Riccati solution escaped to infinity near s = {s}")]
    BlowUp { s: f64 },

    #[error("trajectory left the projection tube at t = {time}")]
    LeftTube {
        time: f64,
        trace: Box<SimulationTrace>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("transverse frame does not close over one period (mismatch {mismatch:e})")]
    FrameHolonomy { mismatch: f64 },

    #[error("curve is not an orbit of the system: max residual {residual:e} at s = {s}")]
    NotAnOrbit { residual: f64, s: f64 },

    #[error("unknown system {0:?}")]
    UnknownSystem(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateTangent { .. } => "degenerate_tangent",
            Error::MissingJacobian(_) => "missing_jacobian",
            Error::ProjectionAmbiguous { .. } => "projection_ambiguous",
            Error::NewtonDiverged { .. } => "newton_diverged",
            Error::FocalPointReached { .. } => "focal_point_reached",
            Error::NonPositiveRate { .. } => "non_positive_rate",
            Error::RankDeficient(_) => "rank_deficient",
            Error::IntegrationFailure { .. } => "integration_failure",
            Error::NotConverged { .. } => "not_converged",
            Error::BlowUp { .. } => "blow_up",
            Error::LeftTube { .. } => "left_tube",
            Error::InsufficientData(_) => "insufficient_data",
            Error::FrameHolonomy { .. } => "frame_holonomy",
            Error::NotAnOrbit { .. } => "not_an_orbit",
            Error::UnknownSystem(_) => "unknown_system",
            Error::InvalidInput(_) => "invalid_input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
