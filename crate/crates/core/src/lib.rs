//! Desk-scale 4D occupancy forecasting.
//!
//! Past LiDAR sweeps are aligned to the current frame, voxelized and encoded
//! as bird's-eye-view (BEV) feature maps, fused over time, and decoded by a
//! recurrent convolutional block into one occupancy grid per future frame. A
//! residual UNet refines the grids, and differentiable expected-depth
//! rendering along query rays turns them into depths that are supervised
//! against future returns with an L1 loss.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod forecast;
pub mod geometry;
pub mod metrics;
pub mod render;
pub mod train;
pub mod voxel;

pub use error::{Error, FormatError, Result};
