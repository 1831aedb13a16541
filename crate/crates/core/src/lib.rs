//! Multi-class wound-tissue segmentation toolkit.
//!
//! A hybrid hierarchical-transformer encoder / CNN decoder with parallel
//! spatial-and-channel squeeze-and-excitation attention, trained supervised
//! (dice + focal) and semi-supervised (pseudo-labeling with a dynamic
//! cross-entropy term), with the evaluation metrics and probabilistic
//! augmentation pipeline that go with it. Everything runs on a small
//! f64 autodiff engine so gradients are verifiable against finite
//! differences at desk scale.

pub mod autodiff;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
