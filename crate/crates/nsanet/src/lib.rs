//! Physics-informed noise filtering for multiple-pulses-in-air (MPIA)
//! airborne LiDAR point clouds.
//!
//! High-PRF airborne LiDAR keeps several pulses in flight at once, which
//! makes the measured range ambiguous: a return may belong to any of several
//! pulse intervals, and mis-assigned returns show up as structured noise in
//! the georeferenced cloud. This crate implements a complete desk-scale
//! pipeline for studying and removing that noise:
//!
//! * [`sim`] — synthetic labeled scenes: terrain, buildings, vegetation,
//!   and the three characteristic noise families (sparse outliers, global
//!   systematic bands near pulse-interval transitions, complex clusters).
//! * [`priors`] — per-point noise probability from the pulse-ambiguity
//!   geometry of the sensor trajectory (range position within the ambiguity
//!   interval).
//! * [`voxel`] — regular-grid features (occupancy, mean height, return
//!   number, intensity, prior probability) and voxel labels.
//! * [`tensor`] — a minimal 4-D tensor library with hand-written forward
//!   and backward passes: 3-D convolution, batch normalization, pooling,
//!   trilinear upsampling, losses, Adam, and finite-difference gradient
//!   checking.
//! * [`model`] — a 3-D encoder-decoder segmentation network with local
//!   additive attention gates and a global prior-probability attention term,
//!   plus ablation variants.
//! * [`train`] — weighted cross-entropy training, evaluation at voxel and
//!   point level, and neighborhood-smoothing post-processing of voxel
//!   predictions.
//! * [`cli`] — the `nsanet` command-line pipeline
//!   (`simulate | priors | voxelize | train | infer | eval | postprocess |
//!   export-ablation`).
//!
//! Start with the runnable examples: `cargo run --release --example
//! end_to_end` walks a synthetic scene through every stage, and each stage
//! also has a focused example (`simulate_scene`, `physical_priors`,
//! `voxelize_cloud`, `gradient_check`, `train_denoiser`,
//! `attention_variants`, `vpp_refine`).
//!
//! Everything is deterministic: all randomness flows from an explicit seed,
//! and results are bitwise reproducible for a given seed at any worker
//! count.

pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod point;
pub mod priors;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use cli::RunManifest;
pub use error::{Error, Result};
pub use model::{GateCombine, Model, ModelConfig, PriorGating, Variant};
pub use point::{PointCloud, PointRecord, Trajectory, TrajectorySample};
pub use priors::{PriorParams, PriorPyramid};
pub use train::{
    evaluate, run_ablation, train, AblationPreset, AblationRow, ClassWeights, Dataset, EvalReport,
    LossChoice, MetricLevel, TrainConfig, TrainItem, TrainLog,
};
pub use voxel::{ChannelSet, FeatureGrid, GridSpec, VoxelOptions};
