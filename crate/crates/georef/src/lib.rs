//! Category-level object pose refinement on point clouds.
//!
//! Given an observed depth point cloud, a categorical shape prior and a rough
//! initial pose, the pipeline predicts a pose-and-size correction and applies
//! it, optionally iterating the prediction several times. The model aligns
//! geometric features of the observation and the prior with learnable affine
//! transforms before predicting the correction.

pub mod cli;
pub mod evalmetrics;
pub mod geometry;
pub mod model;
pub mod netblocks;
pub mod plot;
pub mod results;
pub mod synthdata;
pub mod tape;
pub mod trainrefine;
