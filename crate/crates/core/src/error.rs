use std::io;

use thiserror::Error;

use crate::calibration::Channel;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty distribution: total mass is zero")]
    EmptyDistribution,

    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported initial pose: {0}")]
    UnsupportedInitialPose(String),

    #[error("simulation diverged at t = {time:.3} s")]
    SimulationDiverged { time: f64 },

    #[error("observation window is not uniformly spaced in time")]
    NonUniformWindow,

    #[error("unsupported force application: force attributed to empty contact set S{0}")]
    UnsupportedForce(usize),

    #[error("degenerate inertia: I_zz = {0:e}")]
    DegenerateInertia(f64),

    #[error("channel {0} has no calibration samples")]
    EmptyChannel(Channel),

    #[error("transition has {0} active channels, expected exactly one")]
    MultipleActiveChannels(usize),

    #[error("trajectory has {found} transitions, expected {expected}")]
    TrajectoryLength { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
