//! The four simulated domains. Each exposes reset, an ambient observation
//! stream, a step function and terminal conditions.

pub mod delay_track;
pub mod grid_nav;
pub mod mapgen;
pub mod row_reveal;
pub mod tilt_lander;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("action {action} is not valid (environment has {num_actions} actions)")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("state {0} out of range")]
    InvalidState(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed map JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

pub use delay_track::{DelayTrackConfig, DelayTrackEnv, TrackAction, TrackObservation, TrackView};
pub use grid_nav::{GridMap, GridNavEnv, Heading, NavAction, ObjectCategory, ObjectId};
pub use row_reveal::{ClassPixelModel, RowRevealEnv};
pub use tilt_lander::{LanderAction, LanderState, TiltLanderConfig, TiltLanderEnv};
