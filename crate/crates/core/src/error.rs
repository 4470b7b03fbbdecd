use thiserror::Error;

use crate::atom::Level;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("branching fractions out of {level} sum to {sum}, expected 1")]
    Branching { level: Level, sum: f64 },

    #[error("two drives address the transition {0} <-> {1}")]
    DuplicateDrive(Level, Level),

    #[error("drive on {0} <-> {1} closes a loop; no consistent rotating frame exists")]
    DriveLoop(Level, Level),

    #[error("integration failed at t = {last_good_time:e} s: {reason}")]
    Integration { last_good_time: f64, reason: String },

    #[error("steady state is not unique (null space dimension {dimension}); disconnected levels: {levels:?}")]
    DegenerateSteadyState { dimension: usize, levels: Vec<Level> },

    #[error("steady-state population of {0} is zero; g2 is undefined")]
    ZeroPopulation(Level),

    #[error("field solver did not converge after {iterations} iterations (last residual {:e} V)", residuals.last().copied().unwrap_or(f64::NAN))]
    SolverDiverged { iterations: usize, residuals: Vec<f64> },

    #[error("field map has no interior minimum")]
    NoMinimum,

    #[error("quadratic fit around the minimum is poor (relative residual {0:.3})")]
    PoorQuadraticFit(f64),

    #[error("least-squares fit did not converge (final residual {0:e})")]
    FitDiverged(f64),

    #[error("calibration matrix is singular")]
    Singular,

    #[error("mean count rate of a channel is zero; cannot normalize")]
    ZeroRate,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
