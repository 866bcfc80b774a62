//! Radar-camera SLAM with a 3D Gaussian map.
//!
//! The library covers the full loop: Doppler-based ego-velocity estimation,
//! dynamic-point detection and masking, octree-indexed Gaussian mapping,
//! point-to-Gaussian tracking, differentiable splat rendering, and
//! photometric/geometric map refinement. A deterministic simulator and
//! dataset I/O make every stage reproducible end to end.

pub mod dataset;
pub mod doppler;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod map;
pub mod mask;
pub mod metrics;
pub mod octree;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod sim;
pub mod tracking;

pub use error::{Error, Result};
