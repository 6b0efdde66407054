//! QoS prediction for web services with a reputation-aware hourglass
//! attention network.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`data`] loads a sparse user × service response-time matrix and splits
//!    it by density.
//! 2. [`rcm`] clusters users and services, counts feedback against the
//!    largest cluster's 3σ band and turns the counts into reputations.
//! 3. [`model`] embeds (reputation, id, region) for a user/service pair,
//!    refines the vector through stacked hourglass blocks with self-attention
//!    encoders, and regresses the response time.
//! 4. [`eval`] runs the density protocol, filters outliers, and reports
//!    MAE/RMSE against simple baselines.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod model;
pub mod rcm;
pub mod tensor;

pub use error::{Error, Result};
