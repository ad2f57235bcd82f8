//! RoI-fusion 3D object detection from LiDAR point clouds and camera
//! segmentation.

pub mod backbone;
pub mod commands;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusionkp;
pub mod geom;
pub mod head;
pub mod micronet;
pub mod roi;
pub mod sampling;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
