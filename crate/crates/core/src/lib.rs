//! Camera localization inside a prebuilt LiDAR point-cloud map.
//!
//! The pipeline: a scout platform supplies LiDAR scans, a trajectory and a
//! set of posed database images. [`mapcloud`] assembles a voxel-downsampled
//! world map whose points carry a per-database-image co-visibility index.
//! At query time [`retrieval`] finds the most similar database image,
//! [`solver`] attaches reference features to the co-visible points through
//! that image and refines the 6-DoF camera pose by feature-metric
//! Levenberg-Marquardt over a coarse-to-fine pyramid ([`features`]).
//! [`synth`] generates deterministic synthetic worlds for testing and
//! [`eval`] computes localization metrics and the raw-scan vs. indexed-map
//! ablation.

pub mod eval;
pub mod features;
pub mod geometry;
pub mod mapcloud;
pub mod parallel;
pub mod retrieval;
pub mod solver;
pub mod synth;
