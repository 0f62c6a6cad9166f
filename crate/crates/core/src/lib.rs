//! Segmentation ensembles and their evaluation: mask fusion, a convolutional
//! stacking meta-learner, overlap losses with boundary-softened labels,
//! pixel and mask level metrics, and binomial confidence intervals.
//!
//! Everything operates on exported probability maps, binary masks and
//! feature stacks; no backbone network is trained here.

pub mod augment;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod morpho;
pub mod ndtensor;
pub mod stats;

pub use error::{Error, ErrorClass, Result};
