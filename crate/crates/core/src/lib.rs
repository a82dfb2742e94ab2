//! Pretraining engine that trains a small transformer full-parameter,
//! detects partial convergence from windowed weight-norm and loss
//! statistics, and switches to low-rank-adapter-only training with
//! per-layer ranks assigned from the convergence deltas.

pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod graph;
pub mod lora;
pub mod model;
pub mod optim;
pub mod params;
pub mod planner;
pub mod report;
pub mod telemetry;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
