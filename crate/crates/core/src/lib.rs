//! Viewpoint-invariant multi-agent motion forecasting on lane graphs.

pub mod cache;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod hmp;
pub mod lanegraph;
pub mod map;
pub mod model;
pub mod scenarios;
pub mod track;
pub mod training;

pub use error::{CoreError, Result};
