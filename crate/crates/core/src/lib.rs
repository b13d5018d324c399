//! Loosely coupled GNSS/IMU fusion on a sliding-window factor graph.
//!
//! The crate is organised bottom-up: [`lie`] and [`state`] hold the
//! geometry and measurement types, [`preintegration`] summarizes IMU data
//! between graph states, [`graph`] and [`solver`] build and minimize the
//! nonlinear least-squares problem, and [`engine`] runs the streaming
//! pipeline. [`sim`], [`io`] and [`eval`] cover synthetic data, dataset
//! files and metrics.

pub mod engine;
pub mod eval;
pub mod graph;
pub mod io;
pub mod lie;
pub mod par;
pub mod preintegration;
pub mod sim;
pub mod solver;
pub mod state;

pub use engine::{Engine, EngineConfig, EngineError, OutputEstimate, OutputSource};
pub use state::{GnssFix, ImuBias, ImuNoiseParams, ImuSample, NavState};
