use thiserror::Error;

/// Every failure the models, controllers and simulator can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("pose ({x:.6}, {y:.6}, {z:.6}) is outside the reachable workspace")]
    UnreachablePose { x: f64, y: f64, z: f64 },
    #[error("joint values admit no assembly (discriminant {discriminant:e})")]
    NoAssembly { discriminant: f64 },
    #[error("forward kinematics degenerate: P_B{leg} = 0")]
    DegenerateBranch { leg: usize },
    #[error("no forward kinematic root lies in the z > 0 assembly mode")]
    AssemblyModeViolation,
    #[error("inverse instantaneous kinematic matrix is near singular (|det| = {det:e})")]
    NearSingular { det: f64 },
    #[error("leg {leg} inverse instantaneous kinematics singular (trig term {value:e})")]
    LegSingularity { leg: usize, value: f64 },
    #[error("mass matrix ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("no measurement available yet at t = {t}")]
    NotYetAvailable { t: f64 },
    #[error("derivative estimate needs at least two samples")]
    InsufficientHistory,
    #[error("time {t} outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("path leaves the reachable workspace margin near ({x:.6}, {y:.6}, {z:.6})")]
    WorkspaceViolation { x: f64, y: f64, z: f64 },
    #[error("simulation diverged at t = {t}: {reason}")]
    SimDiverged { t: f64, reason: String },
    #[error("metrics window is empty (skip {skip} s)")]
    EmptyWindow { skip: f64 },
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Stable identifier for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnreachablePose { .. } => "UnreachablePose",
            Error::NoAssembly { .. } => "NoAssembly",
            Error::DegenerateBranch { .. } => "DegenerateBranch",
            Error::AssemblyModeViolation => "AssemblyModeViolation",
            Error::NearSingular { .. } => "NearSingular",
            Error::LegSingularity { .. } => "LegSingularity",
            Error::IllConditioned { .. } => "IllConditioned",
            Error::NotYetAvailable { .. } => "NotYetAvailable",
            Error::InsufficientHistory => "InsufficientHistory",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::WorkspaceViolation { .. } => "WorkspaceViolation",
            Error::SimDiverged { .. } => "SimDiverged",
            Error::EmptyWindow { .. } => "EmptyWindow",
            Error::Config(_) => "ConfigError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
