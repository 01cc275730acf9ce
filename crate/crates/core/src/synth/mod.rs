//! Deterministic synthetic world generator: textured rectangle scenes,
//! ray-cast rendering and LiDAR simulation, ground-truth trajectories and
//! on-disk dataset assembly. Everything is a pure function of (spec, seed),
//! so regenerating a dataset is bit-identical.

mod dataset;
mod scene;
mod trajectory;

pub use dataset::{Dataset, DatasetSpec};
pub use scene::{
    generate_scene, render_image, render_with_depth, simulate_scan, LidarPattern, Patch,
    RangeNoise, Scene, SceneSpec,
};
pub use trajectory::{generate_trajectory, TrajectoryBundle, TrajectorySpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene or trajectory spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}
