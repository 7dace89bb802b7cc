//! Fully sparse voxel pipeline for LiDAR-style 3D object detection.
//!
//! The crate is organized around [`tensor::SparseTensor3D`] /
//! [`tensor::SparseTensor2D`]: coordinate lists with per-site feature rows and
//! an exact coordinate-to-row index. A sparse convolutional backbone
//! ([`backbone`]) produces six stages at strides 1..32, the local multi-scale
//! aggregation module ([`lmfa`]) enhances heatmap-selected key voxels with
//! cross-scale KNN context, and the global aggregation module ([`gfa`])
//! refines query features with distance-biased attention over the whole
//! scene before box prediction. [`train`] supplies target assignment, losses,
//! explicit reverse-mode gradients with finite-difference verification and a
//! small optimizer; [`evalkit`] the rotated-IoU / AP(R40) metrics; [`scene`]
//! a deterministic synthetic scene generator plus point-file IO; [`config`]
//! the flat `key = value` configuration with presets.
//!
//! Everything is plain `f64` on `std` only, so the crate builds unchanged for
//! `wasm32-unknown-unknown`.

pub mod backbone;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gfa;
pub mod knn;
pub mod lmfa;
pub mod mat;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mat::Mat;
pub use params::ParamStore;
