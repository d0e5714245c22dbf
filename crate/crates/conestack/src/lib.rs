//! Desk-scale re-implementation of a redundant perception and state
//! estimation stack for cone-delimited race tracks.
//!
//! The crate bundles everything needed to exercise the stack without a
//! vehicle: a procedural track generator and slip-aware plant ([`track`],
//! [`vehicle`], [`driver`]), synthetic sensors with scripted failures
//! ([`sensors`]), a geometric LiDAR cone pipeline ([`lidar`]), a velocity
//! EKF with probabilistic per-sensor fault detection ([`velocity`]), a
//! Rao-Blackwellized particle-filter SLAM over cone landmarks ([`slam`]),
//! and a deterministic simulation/replay/evaluation harness ([`sim`],
//! [`log`], [`eval`], [`config`]).

pub mod assign;
pub mod config;
pub mod driver;
pub mod eval;
pub mod geom;
pub mod lidar;
pub mod log;
pub mod sensors;
pub mod sim;
pub mod slam;
pub mod track;
pub mod vehicle;
pub mod velocity;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("covariance is not symmetric positive semidefinite: {0}")]
    NotPsd(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("infeasible track geometry: {0}")]
    InfeasibleTrack(String),
    #[error("infeasible speed profile: {0}")]
    InfeasibleSpeed(String),
    #[error("unknown sensor id `{0}`")]
    UnknownSensor(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;