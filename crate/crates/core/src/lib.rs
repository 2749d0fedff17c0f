//! Greenhouse temperature forecasting: recurrent and graph-attention models,
//! data preparation and synthetic benchmark generation.

pub mod datapipe;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod models;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
