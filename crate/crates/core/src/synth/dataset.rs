//! Whole-dataset generation and the on-disk layout shared by the CLI and
//! the evaluation harness:
//!
//! ```text
//! out/
//!   scene.json        dataset spec + seed (regenerates bit-identically)
//!   cam.txt           pinhole intrinsics, `key value` lines
//!   scans/            scan_NNNNNN.cvsc binary scans, lidar frame
//!   images_db/        img_NNNNNN.pgm database images
//!   images_query/     img_NNNNNN.pgm query images
//!   traj_lidar.tum    world-from-lidar poses at scan times
//!   traj_db.tum       world-from-camera poses of database images
//!   traj_query_gt.tum world-from-camera ground truth of query images
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, render_image, simulate_scan, LidarPattern, RangeNoise, Scene, SceneSpec};
use super::trajectory::{generate_trajectory, TrajectoryBundle, TrajectorySpec};
use super::SynthError;
use crate::features::GrayImage;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::mapcloud::{self, LidarScan, TimedPose};
use crate::parallel;

/// Full synthetic dataset specification. Desk scale is the default; the
/// paper-scale layout is the same thing ten times larger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub intrinsics: CameraIntrinsics,
    pub lidar: LidarPattern,
    /// Mount transform, camera-from-lidar.
    pub mount: Pose,
    /// Gaussian range noise sigma, meters; 0 disables.
    pub range_noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Desk-scale default: a 13.4 x 8.4 m room with a 38 m loop, 30
    /// database images and 100 queries.
    pub fn desk(seed: u64) -> Self {
        let scene = SceneSpec {
            panel_density: 0.12,
            ..SceneSpec::room([15.2, 9.6, 3.0])
        };
        let trajectory = TrajectorySpec::rectangle(38.0, [7.6, 4.8]);
        Self {
            scene,
            trajectory,
            intrinsics: CameraIntrinsics::new(200.0, 200.0, 159.5, 119.5, 320, 240),
            lidar: LidarPattern::default(),
            mount: default_mount(),
            range_noise_sigma: 0.0,
            seed,
        }
    }

    /// Paper-scale layout: 380 m loop, 300 database images.
    pub fn paper_scale(seed: u64) -> Self {
        let mut spec = Self::desk(seed);
        spec.scene.extent = [152.0, 96.0, 3.0];
        spec.trajectory = TrajectorySpec {
            loop_length: 380.0,
            image_spacing: 380.0 / 300.0,
            center: [76.0, 48.0],
            lidar_step: 0.1,
            query_count: 300,
            ..spec.trajectory
        };
        spec
    }

    /// Two-room layout whose loop threads the doorway twice; the occlusion
    /// stress case. Crossings happen mid-segment so corner rounding cannot
    /// cut them, and the loop keeps its absolute coordinates (scale 1).
    pub fn two_room(seed: u64) -> Self {
        let mut spec = Self::desk(seed);
        spec.scene = SceneSpec {
            two_room: true,
            doorway: [1.6, 2.2],
            panel_density: 0.12,
            ..SceneSpec::room([12.0, 8.0, 3.0])
        };
        // divider at x = 6, door y in [3.2, 4.8]; the two straight
        // crossing segments pass it at y = 4.0 and y = 4.4
        let waypoints = vec![
            [4.2, 4.0],
            [7.8, 4.0],
            [10.2, 2.0],
            [10.8, 4.0],
            [10.2, 6.2],
            [7.8, 4.4],
            [4.2, 4.4],
            [1.8, 6.2],
            [1.2, 4.0],
            [1.8, 2.0],
        ];
        let corner_radius = 0.6;
        let loop_length = super::trajectory::natural_loop_length(&waypoints, corner_radius)
            .expect("two-room waypoints are valid");
        spec.trajectory = TrajectorySpec {
            loop_length,
            corner_radius,
            center: [0.0, 0.0],
            image_spacing: 1.0,
            lidar_step: 0.08,
            query_count: 40,
            waypoints: Some(waypoints),
            ..spec.trajectory
        };
        spec
    }
}

/// Camera-from-lidar mount: lidar 8 cm above the camera, x-forward/z-up
/// sensor axes mapped onto the camera's x-right/y-down/z-forward frame.
pub fn default_mount() -> Pose {
    let rot = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    Pose::new(
        nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(rot),
        ),
        nalgebra::Vector3::new(0.0, -0.08, 0.0),
    )
}

/// A generated (or loaded) dataset, fully in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: Option<DatasetSpec>,
    pub scene: Option<Scene>,
    pub intrinsics: CameraIntrinsics,
    pub scans: Vec<LidarScan>,
    /// World-from-lidar poses at scan times.
    pub lidar_traj: Vec<TimedPose>,
    /// World-from-camera poses of database images.
    pub db_poses: Vec<TimedPose>,
    /// World-from-camera ground truth of query images.
    pub query_gt: Vec<TimedPose>,
    pub db_images: Vec<GrayImage>,
    pub query_images: Vec<GrayImage>,
}

impl Dataset {
    /// Generates the dataset deterministically from the spec.
    pub fn generate(spec: &DatasetSpec) -> Result<Self, SynthError> {
        let scene = generate_scene(&spec.scene, spec.seed)?;
        let TrajectoryBundle {
            dense, db, queries, ..
        } = generate_trajectory(&spec.trajectory, spec.seed)?;

        // lidar rides along the camera path through the mount transform
        let lidar_traj: Vec<TimedPose> = dense
            .iter()
            .map(|tp| TimedPose {
                timestamp: tp.timestamp,
                pose: tp.pose.compose(&spec.mount),
            })
            .collect();
        let noise = if spec.range_noise_sigma > 0.0 {
            Some(RangeNoise {
                sigma: spec.range_noise_sigma,
                seed: spec.seed ^ 0x5ca0_0515,
            })
        } else {
            None
        };
        let scans: Vec<LidarScan> = parallel::map_slice(&lidar_traj, |tp| {
            simulate_scan(&scene, &tp.pose, &spec.lidar, tp.timestamp, noise)
        });

        let render_all = |poses: &[TimedPose]| -> Vec<GrayImage> {
            parallel::map_slice(poses, |tp| render_image(&scene, &tp.pose, &spec.intrinsics))
        };
        let db_images = render_all(&db);
        let query_images = render_all(&queries);

        Ok(Self {
            spec: Some(spec.clone()),
            scene: Some(scene),
            intrinsics: spec.intrinsics,
            scans,
            lidar_traj,
            db_poses: db,
            query_gt: queries,
            db_images,
            query_images,
        })
    }

    /// Writes the dataset in the documented directory layout.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        if let Some(spec) = &self.spec {
            let json = serde_json::to_string_pretty(spec)
                .map_err(|e| SynthError::Dataset(e.to_string()))?;
            std::fs::write(dir.join("scene.json"), json + "\n")?;
        }
        std::fs::write(
            dir.join("cam.txt"),
            self.intrinsics.to_file_contents(),
        )?;

        let scans_dir = dir.join("scans");
        std::fs::create_dir_all(&scans_dir)?;
        for (i, scan) in self.scans.iter().enumerate() {
            scan.save(&scans_dir.join(format!("scan_{i:06}.cvsc")))
                .map_err(|e| SynthError::Dataset(e.to_string()))?;
        }

        let write_images = |sub: &str, images: &[GrayImage]| -> Result<(), SynthError> {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d)?;
            for (i, img) in images.iter().enumerate() {
                img.save_pgm(&d.join(format!("img_{i:06}.pgm")))
                    .map_err(|e| SynthError::Dataset(e.to_string()))?;
            }
            Ok(())
        };
        write_images("images_db", &self.db_images)?;
        write_images("images_query", &self.query_images)?;

        let tum = |name: &str, traj: &[TimedPose]| -> Result<(), SynthError> {
            mapcloud::write_tum(&dir.join(name), traj)
                .map_err(|e| SynthError::Dataset(e.to_string()))
        };
        tum("traj_lidar.tum", &self.lidar_traj)?;
        tum("traj_db.tum", &self.db_poses)?;
        tum("traj_query_gt.tum", &self.query_gt)?;
        Ok(())
    }

    /// Loads a dataset directory written by [`Dataset::write`] (or any
    /// external data in the same layout).
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let intrinsics = CameraIntrinsics::from_file(&dir.join("cam.txt"))
            .map_err(|e| SynthError::Dataset(e.to_string()))?;
        let spec: Option<DatasetSpec> = match std::fs::read_to_string(dir.join("scene.json")) {
            Ok(json) => Some(
                serde_json::from_str(&json).map_err(|e| SynthError::Dataset(e.to_string()))?,
            ),
            Err(_) => None,
        };
        let scene = match &spec {
            Some(s) => Some(generate_scene(&s.scene, s.seed)?),
            None => None,
        };

        let scans = load_sorted(&dir.join("scans"), "cvsc", |p| {
            LidarScan::load(p).map_err(|e| SynthError::Dataset(e.to_string()))
        })?;
        let db_images = load_sorted(&dir.join("images_db"), "pgm", |p| {
            GrayImage::load_pgm(p).map_err(|e| SynthError::Dataset(e.to_string()))
        })?;
        let query_images = load_sorted(&dir.join("images_query"), "pgm", |p| {
            GrayImage::load_pgm(p).map_err(|e| SynthError::Dataset(e.to_string()))
        })?;

        let tum = |name: &str| -> Result<Vec<TimedPose>, SynthError> {
            mapcloud::read_tum(&dir.join(name)).map_err(|e| SynthError::Dataset(e.to_string()))
        };
        let lidar_traj = tum("traj_lidar.tum")?;
        let db_poses = tum("traj_db.tum")?;
        let query_gt = tum("traj_query_gt.tum")?;
        if db_images.len() != db_poses.len() {
            return Err(SynthError::Dataset(format!(
                "{} database images but {} poses",
                db_images.len(),
                db_poses.len()
            )));
        }
        Ok(Self {
            spec,
            scene,
            intrinsics,
            scans,
            lidar_traj,
            db_poses,
            query_gt,
            db_images,
            query_images,
        })
    }
}

/// Loads every `*.ext` file in a directory in filename-sorted order.
pub fn load_sorted<T>(
    dir: &Path,
    ext: &str,
    loader: impl Fn(&Path) -> Result<T, SynthError>,
) -> Result<Vec<T>, SynthError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| loader(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_spec() -> DatasetSpec {
        let mut spec = DatasetSpec::desk(7);
        spec.scene.extent = [6.0, 4.0, 2.5];
        spec.scene.panel_density = 0.1;
        spec.trajectory = TrajectorySpec {
            loop_length: 10.0,
            image_spacing: 2.0,
            lidar_step: 0.5,
            query_count: 4,
            center: [3.0, 2.0],
            ..spec.trajectory
        };
        spec.lidar.azimuth_step = 4.0;
        spec
    }

    #[test]
    fn generate_shapes_match_spec() {
        let ds = Dataset::generate(&tiny_spec()).unwrap();
        assert_eq!(ds.db_poses.len(), 5); // 10 m / 2 m spacing
        assert_eq!(ds.db_images.len(), 5);
        assert_eq!(ds.query_images.len(), 4);
        assert_eq!(ds.scans.len(), ds.lidar_traj.len());
        assert!(ds.scans.iter().all(|s| !s.points.is_empty()));
    }

    #[test]
    fn scan_points_land_on_scene_surfaces() {
        let ds = Dataset::generate(&tiny_spec()).unwrap();
        let scene = ds.scene.as_ref().unwrap();
        for (scan, tp) in ds.scans.iter().zip(&ds.lidar_traj).step_by(5) {
            assert_eq!(scan.timestamp, tp.timestamp);
            for p in scan.points.iter().step_by(97) {
                let p_world = tp.pose.transform_point(p);
                // distance to the nearest patch plane containing the point
                let min_dist = scene
                    .patches
                    .iter()
                    .map(|patch| {
                        let n = patch.normal().normalize();
                        (n.dot(&(p_world - patch.corner))).abs()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(min_dist < 1e-6, "point {min_dist} m off the surfaces");
            }
        }
    }

    #[test]
    fn mount_offsets_lidar_from_camera_path() {
        let spec = tiny_spec();
        let ds = Dataset::generate(&spec).unwrap();
        // dense camera pose = lidar pose * mount^{-1}
        let cam0 = ds.lidar_traj[0].pose.compose(&spec.mount.inverse());
        // lidar sits 8 cm along camera -y, which is world-up cos(pitch)
        let pitch = spec.trajectory.pitch_deg.to_radians();
        assert_relative_eq!(
            ds.lidar_traj[0].pose.translation.z - cam0.translation.z,
            0.08 * pitch.cos(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn write_load_roundtrip() {
        let ds = Dataset::generate(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.db_images.len(), ds.db_images.len());
        assert_eq!(back.query_images.len(), ds.query_images.len());
        assert_eq!(back.scans.len(), ds.scans.len());
        assert_eq!(back.db_images[0], ds.db_images[0]);
        assert_eq!(back.intrinsics, ds.intrinsics);
        // scan points roundtrip through f32 storage
        let a = &ds.scans[0].points[0];
        let b = &back.scans[0].points[0];
        assert!((a - b).norm() < 1e-4);
        // regenerated scene from the stored spec matches
        assert_eq!(
            back.scene.as_ref().unwrap().patches.len(),
            ds.scene.as_ref().unwrap().patches.len()
        );
    }

    #[test]
    fn two_room_loop_stays_inside_and_crosses_door() {
        let spec = DatasetSpec::two_room(1);
        let bundle = generate_trajectory(&spec.trajectory, spec.seed).unwrap();
        let [w, d, _] = spec.scene.extent;
        let mut crossings = 0;
        for pair in bundle.dense.windows(2) {
            let a = pair[0].pose.translation;
            let b = pair[1].pose.translation;
            assert!(a.x > 0.0 && a.x < w && a.y > 0.0 && a.y < d, "left the room: {a:?}");
            let xm = w / 2.0;
            if (a.x - xm) * (b.x - xm) < 0.0 {
                crossings += 1;
                // crossing must happen inside the doorway
                let t = (xm - a.x) / (b.x - a.x);
                let y = a.y + t * (b.y - a.y);
                let (y0, y1) = ((d - spec.scene.doorway[0]) / 2.0, (d + spec.scene.doorway[0]) / 2.0);
                assert!(y > y0 && y < y1, "crossed the divider at y={y}");
            }
        }
        assert_eq!(crossings, 2);
    }
}
