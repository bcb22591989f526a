//! Kalman filtering with learned process and measurement noise covariances.
//!
//! The crate covers the whole loop: a linear Kalman filter and Riccati solver,
//! innovation consistency statistics, a linear bicycle-model simulator that
//! produces labelled training windows, an LSTM noise predictor trained with
//! optional innovation penalties, and an adaptive filter that re-estimates its
//! noise covariances online.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod innovation;
pub mod numerics;
pub mod predictor;
pub mod runtime;
pub mod training;
pub mod vehicle;

pub use error::{Error, Result};
