//! Spatial panel econometrics for the local effects of mine openings and
//! closings.
//!
//! The crate covers the quantitative pipeline end to end: deposit life-cycle
//! classification ([`lifecycle`]), tiling and tile assignment ([`geo`]),
//! land-cover shares from segmentation masks ([`raster`]), outlier screening
//! ([`screening`]), panel assembly and descriptives ([`panel`]), stacked
//! event construction ([`stacking`]), fixed-effects estimation with clustered
//! inference ([`estimator`]), a seeded synthetic data generator ([`synth`])
//! and the batch pipeline behind the command-line tool ([`pipeline`]).

pub mod deposit;
pub mod dist;
pub mod estimator;
pub mod error;
pub mod geo;
pub mod lifecycle;
pub mod panel;
pub mod pipeline;
pub mod raster;
pub mod screening;
pub mod stacking;
pub mod synth;

pub use error::{Error, Result};
