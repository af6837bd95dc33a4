//! Highway simulation, trajectory planning, soft actor-critic agents, the
//! attention-based risk model and the safe-critical-acceleration guard.

pub mod agent;
pub mod frenet;
pub mod guard;
pub mod harness;
pub mod rewards;
pub mod rq;
pub mod sim;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("could not place {requested} vehicles collision-free (placed {placed})")]
    Placement { requested: usize, placed: usize },
    #[error("planning horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("time {t} outside trajectory horizon [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("cannot sample from an empty replay buffer")]
    EmptyReplay,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub fn io_at(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}
