//! Desk-scale causal language model training.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod trainer;
