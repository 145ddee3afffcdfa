//! Rotating boxes of unknown mass distribution on two conveyor belts.
//!
//! The crate holds a planar belt simulator, a gray-box one-step predictor built
//! from the equations of motion, the learned pieces it relies on (a control to
//! force calibration and a mass-distribution estimator), the Pareto-selecting
//! MPC loop, a black-box baseline, and the experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod calibration;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod massmodel;
pub mod nn;
pub mod predictor;
pub mod sim;

pub use calibration::{Channel, ControlForceMap};
pub use controller::{EpisodeResult, Outcome, RewardPair};
pub use error::{Error, Result};
pub use massmodel::{GridDims, HazardReport, HazardVolume, MassDistribution, OccupancyGrid};
pub use predictor::{KinematicEstimate, PosePrediction};
pub use sim::{Action, BeltConfig, Observation, Pose2, Restriction, SimState, Simulator, Trajectory};
