//! Dual-decoder U-Net with a dilated-convolution attention module for binary
//! road segmentation of aerial imagery, with the data, training, evaluation and
//! visualisation tooling around it.

pub mod ablate;
pub mod archive;
pub mod attention;
pub mod broadcast;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod dcam;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predict;
pub mod train;

pub use error::{Error, Result};
