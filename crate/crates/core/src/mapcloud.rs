//! LiDAR map assembly, voxel downsampling, per-image co-visibility indexing,
//! binary map/scan storage and TUM trajectory I/O.
//!
//! Each scan is placed in the world by interpolating the supplied
//! trajectory at the scan timestamp and is associated with the temporally
//! nearest database image. A point is tagged with that image id iff it
//! projects validly into the image (in bounds, in front of the near plane,
//! within `covis_max_range`). Voxel downsampling replaces every occupied
//! voxel with the centroid of its points and the union of their tags;
//! points whose tag set ends up empty are dropped.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, Pose};
use crate::parallel;

const MAP_MAGIC: &[u8; 6] = b"CVPM1\0";
const SCAN_MAGIC: &[u8; 6] = b"CVSC1\0";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("timestamp {t} outside trajectory span [{start}, {end}]")]
    TimestampOutOfRange { t: f64, start: f64, end: f64 },
    #[error("unknown image id {id}, map indexes {count} images")]
    UnknownImageId { id: u32, count: u32 },
    #[error("bad magic bytes, not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("corrupt co-visibility index: {0}")]
    CorruptIndex(String),
    #[error("bad trajectory line {line}: {reason}")]
    BadTrajectory { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One LiDAR sweep: sensor-frame points plus the capture time.
#[derive(Debug, Clone)]
pub struct LidarScan {
    pub timestamp: f64,
    pub points: Vec<Vector3<f64>>,
}

impl LidarScan {
    /// Binary scan file: magic, f64 timestamp, u32 count, count * 3 * f32.
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(SCAN_MAGIC)?;
        w.write_f64::<LittleEndian>(self.timestamp)?;
        w.write_u32::<LittleEndian>(self.points.len() as u32)?;
        for p in &self.points {
            w.write_f32::<LittleEndian>(p.x as f32)?;
            w.write_f32::<LittleEndian>(p.y as f32)?;
            w.write_f32::<LittleEndian>(p.z as f32)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != SCAN_MAGIC {
            return Err(MapError::BadMagic { expected: "CVSC1" });
        }
        let timestamp = r.read_f64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let x = r.read_f32::<LittleEndian>()?;
            let y = r.read_f32::<LittleEndian>()?;
            let z = r.read_f32::<LittleEndian>()?;
            points.push(Vector3::new(f64::from(x), f64::from(y), f64::from(z)));
        }
        Ok(Self { timestamp, points })
    }
}

/// A pose with its capture time. Trajectories keep timestamps strictly
/// increasing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Reads a TUM trajectory: lines of `timestamp tx ty tz qx qy qz qw`.
pub fn read_tum(path: &Path) -> Result<Vec<TimedPose>, MapError> {
    parse_tum(&std::fs::read_to_string(path)?)
}

pub fn parse_tum(text: &str) -> Result<Vec<TimedPose>, MapError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MapError::BadTrajectory {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(MapError::BadTrajectory {
                line: lineno + 1,
                reason: format!("expected 8 fields, got {}", vals.len()),
            });
        }
        out.push(TimedPose {
            timestamp: vals[0],
            pose: Pose::from_parts(vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7]),
        });
    }
    Ok(out)
}

pub fn write_tum(path: &Path, traj: &[TimedPose]) -> Result<(), MapError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for tp in traj {
        w.write_all(format_tum_line(tp).as_bytes())?;
    }
    Ok(())
}

pub fn format_tum_line(tp: &TimedPose) -> String {
    let t = tp.pose.translation;
    let q = tp.pose.rotation.quaternion();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
        tp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

/// Interpolates the trajectory at time `t` (translation lerp, rotation
/// slerp). `t` must lie within the trajectory time span.
pub fn interpolate_pose(traj: &[TimedPose], t: f64) -> Result<Pose, MapError> {
    if traj.is_empty() {
        return Err(MapError::EmptyInput("trajectory"));
    }
    let start = traj[0].timestamp;
    let end = traj[traj.len() - 1].timestamp;
    if t < start || t > end {
        return Err(MapError::TimestampOutOfRange { t, start, end });
    }
    let idx = traj.partition_point(|tp| tp.timestamp <= t);
    if idx == 0 {
        return Ok(traj[0].pose);
    }
    if idx >= traj.len() {
        return Ok(traj[traj.len() - 1].pose);
    }
    let a = &traj[idx - 1];
    let b = &traj[idx];
    let alpha = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Ok(geometry::interpolate(&a.pose, &b.pose, alpha))
}

/// Index of the temporally nearest entry; earlier entry wins ties.
pub fn nearest_timestamp(traj: &[TimedPose], t: f64) -> usize {
    debug_assert!(!traj.is_empty());
    let idx = traj.partition_point(|tp| tp.timestamp < t);
    if idx == 0 {
        return 0;
    }
    if idx >= traj.len() {
        return traj.len() - 1;
    }
    let before = t - traj[idx - 1].timestamp;
    let after = traj[idx].timestamp - t;
    if before <= after {
        idx - 1
    } else {
        idx
    }
}

/// World-frame map points with a per-database-image co-visibility index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedMap {
    pub points: Vec<Vector3<f64>>,
    /// For each database image id, the strictly ascending point indices
    /// visible from that image.
    pub covis: Vec<Vec<u32>>,
    pub voxel_size: f64,
}

impl IndexedMap {
    pub fn image_count(&self) -> u32 {
        self.covis.len() as u32
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// The points tagged visible from `image_id`, in ascending index order.
    pub fn covisible_points(
        &self,
        image_id: u32,
    ) -> Result<Vec<(u32, Vector3<f64>)>, MapError> {
        let list = self
            .covis
            .get(image_id as usize)
            .ok_or(MapError::UnknownImageId {
                id: image_id,
                count: self.image_count(),
            })?;
        Ok(list
            .iter()
            .map(|&i| (i, self.points[i as usize]))
            .collect())
    }

    /// Binary map file: magic, u32 version, f64 voxel_size, u32 N, u32 M,
    /// N * 3 * f64 points, then M blocks of { u32 count, count * u32 }.
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAP_MAGIC)?;
        w.write_u32::<LittleEndian>(MAP_VERSION)?;
        w.write_f64::<LittleEndian>(self.voxel_size)?;
        w.write_u32::<LittleEndian>(self.points.len() as u32)?;
        w.write_u32::<LittleEndian>(self.covis.len() as u32)?;
        for p in &self.points {
            w.write_f64::<LittleEndian>(p.x)?;
            w.write_f64::<LittleEndian>(p.y)?;
            w.write_f64::<LittleEndian>(p.z)?;
        }
        for list in &self.covis {
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for &i in list {
                w.write_u32::<LittleEndian>(i)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAP_MAGIC {
            return Err(MapError::BadMagic { expected: "CVPM1" });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MAP_VERSION {
            return Err(MapError::CorruptIndex(format!(
                "unsupported version {version}"
            )));
        }
        let voxel_size = r.read_f64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let x = r.read_f64::<LittleEndian>()?;
            let y = r.read_f64::<LittleEndian>()?;
            let z = r.read_f64::<LittleEndian>()?;
            points.push(Vector3::new(x, y, z));
        }
        let mut covis = Vec::with_capacity(m);
        for img in 0..m {
            let count = r.read_u32::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(count);
            let mut prev: Option<u32> = None;
            for _ in 0..count {
                let idx = r.read_u32::<LittleEndian>()?;
                if idx as usize >= n {
                    return Err(MapError::CorruptIndex(format!(
                        "image {img}: point index {idx} out of bounds ({n} points)"
                    )));
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(MapError::CorruptIndex(format!(
                            "image {img}: indices not strictly ascending"
                        )));
                    }
                }
                prev = Some(idx);
                list.push(idx);
            }
            covis.push(list);
        }
        Ok(Self {
            points,
            covis,
            voxel_size,
        })
    }
}

/// Map construction parameters. `voxel_size` controls downsampling;
/// `covis_max_range` caps the camera-to-point distance for tagging;
/// `zbuffer_check` enables an optional per-image depth-buffer re-check that
/// drops tagged points hidden behind nearer tagged points.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapBuildParams {
    pub voxel_size: f64,
    pub covis_max_range: f64,
    pub zbuffer_check: bool,
    pub zbuffer_margin: f64,
}

impl Default for MapBuildParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            covis_max_range: 30.0,
            zbuffer_check: false,
            zbuffer_margin: 0.1,
        }
    }
}

/// Assembles the indexed map.
///
/// `traj` is world-from-body for the body frame the scans' sensor is
/// mounted on, and `extrinsic` is body-from-lidar; pass the lidar's own
/// trajectory and the identity when scans are tracked directly. `db_poses`
/// are world-from-camera poses of the database images.
pub fn build_indexed_map(
    scans: &[LidarScan],
    traj: &[TimedPose],
    db_poses: &[TimedPose],
    k: &CameraIntrinsics,
    extrinsic: &Pose,
    params: &MapBuildParams,
) -> Result<IndexedMap, MapError> {
    if scans.is_empty() {
        return Err(MapError::EmptyInput("scans"));
    }
    if traj.is_empty() {
        return Err(MapError::EmptyInput("trajectory"));
    }
    if db_poses.is_empty() {
        return Err(MapError::EmptyInput("database poses"));
    }
    // Fail fast on out-of-span scans before doing any work.
    for scan in scans {
        let start = traj[0].timestamp;
        let end = traj[traj.len() - 1].timestamp;
        if scan.timestamp < start || scan.timestamp > end {
            return Err(MapError::TimestampOutOfRange {
                t: scan.timestamp,
                start,
                end,
            });
        }
    }

    let max_range2 = params.covis_max_range * params.covis_max_range;
    // Per scan: world points plus the single image tag earned by a valid
    // projection into the temporally nearest database image.
    let per_scan: Vec<Vec<(Vector3<f64>, u32)>> = parallel::map_slice(scans, |scan| {
        let body_world = interpolate_pose(traj, scan.timestamp).expect("span checked above");
        let lidar_world = body_world.compose(extrinsic);
        let image_id = nearest_timestamp(db_poses, scan.timestamp) as u32;
        let cam_from_world = db_poses[image_id as usize].pose.inverse();
        let mut tagged = Vec::new();
        for p in &scan.points {
            let p_world = lidar_world.transform_point(p);
            let p_cam = cam_from_world.transform_point(&p_world);
            if p_cam.norm_squared() > max_range2 {
                continue;
            }
            if geometry::project(k, &p_cam).valid {
                tagged.push((p_world, image_id));
            }
        }
        tagged
    });

    let mut points = Vec::new();
    let mut tags: Vec<Vec<u32>> = Vec::new();
    for scan_points in per_scan {
        for (p, id) in scan_points {
            points.push(p);
            tags.push(vec![id]);
        }
    }

    let (mut points, mut tags) = voxel_downsample(&points, &tags, params.voxel_size);

    if params.zbuffer_check {
        zbuffer_filter(&mut points, &mut tags, db_poses, k, params.zbuffer_margin);
    }

    // Drop points whose tag set emptied out, then invert to per-image lists.
    let image_count = db_poses.len();
    let mut covis: Vec<Vec<u32>> = vec![Vec::new(); image_count];
    let mut kept_points = Vec::with_capacity(points.len());
    for (p, tag_set) in points.into_iter().zip(tags) {
        if tag_set.is_empty() {
            continue;
        }
        let idx = kept_points.len() as u32;
        kept_points.push(p);
        for id in tag_set {
            covis[id as usize].push(idx);
        }
    }

    Ok(IndexedMap {
        points: kept_points,
        covis,
        voxel_size: params.voxel_size,
    })
}

/// Replaces each occupied voxel (key = floor(coord / voxel_size) per axis)
/// with its centroid and the union of the member tag sets. Output is
/// ordered by ascending voxel key; tag sets come back sorted.
pub fn voxel_downsample(
    points: &[Vector3<f64>],
    tags: &[Vec<u32>],
    voxel_size: f64,
) -> (Vec<Vector3<f64>>, Vec<Vec<u32>>) {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    assert_eq!(points.len(), tags.len());
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize, Vec<u32>)> = HashMap::new();
    for (p, tag_set) in points.iter().zip(tags) {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let cell = cells
            .entry(key)
            .or_insert_with(|| (Vector3::zeros(), 0, Vec::new()));
        cell.0 += p;
        cell.1 += 1;
        for &t in tag_set {
            if !cell.2.contains(&t) {
                cell.2.push(t);
            }
        }
    }
    // Hash order is not deterministic; sort by key for reproducible output.
    let mut entries: Vec<_> = cells.into_iter().collect();
    entries.sort_unstable_by_key(|(key, _)| *key);
    let mut out_points = Vec::with_capacity(entries.len());
    let mut out_tags = Vec::with_capacity(entries.len());
    for (_, (sum, count, mut tag_set)) in entries {
        out_points.push(sum / count as f64);
        tag_set.sort_unstable();
        out_tags.push(tag_set);
    }
    (out_points, out_tags)
}

/// Per-image depth-buffer visibility re-check: a tagged point survives only
/// if no other point tagged for the same image lands in the same pixel at a
/// meaningfully smaller range.
fn zbuffer_filter(
    points: &mut [Vector3<f64>],
    tags: &mut [Vec<u32>],
    db_poses: &[TimedPose],
    k: &CameraIntrinsics,
    margin: f64,
) {
    for (image_id, db_pose) in db_poses.iter().enumerate() {
        let cam_from_world = db_pose.pose.inverse();
        let image_id = image_id as u32;
        // gather candidate (point index, pixel, range)
        let mut candidates = Vec::new();
        for (i, (p, tag_set)) in points.iter().zip(tags.iter()).enumerate() {
            if !tag_set.contains(&image_id) {
                continue;
            }
            let p_cam = cam_from_world.transform_point(p);
            let pr = geometry::project(k, &p_cam);
            let px = (pr.uv.x.round() as i64, pr.uv.y.round() as i64);
            candidates.push((i, px, p_cam.norm()));
        }
        let mut depth: HashMap<(i64, i64), f64> = HashMap::new();
        for (_, px, range) in &candidates {
            depth
                .entry(*px)
                .and_modify(|d| *d = d.min(*range))
                .or_insert(*range);
        }
        for (i, px, range) in candidates {
            if range > depth[&px] + margin {
                tags[i].retain(|&t| t != image_id);
            }
        }
    }
}

/// Builds the raw-scan ablation variant: per-image point sets taken
/// directly from the temporally nearest scans, tagged by the same validity
/// rule but with no voxel downsampling or map accumulation. Returned as an
/// `IndexedMap` with `voxel_size = 0` so downstream code is identical.
pub fn build_raw_scan_index(
    scans: &[LidarScan],
    traj: &[TimedPose],
    db_poses: &[TimedPose],
    k: &CameraIntrinsics,
    extrinsic: &Pose,
    covis_max_range: f64,
) -> Result<IndexedMap, MapError> {
    if scans.is_empty() {
        return Err(MapError::EmptyInput("scans"));
    }
    if db_poses.is_empty() {
        return Err(MapError::EmptyInput("database poses"));
    }
    let max_range2 = covis_max_range * covis_max_range;
    let per_scan: Vec<Vec<(Vector3<f64>, u32)>> = parallel::map_slice(scans, |scan| {
        let body_world = match interpolate_pose(traj, scan.timestamp) {
            Ok(p) => p,
            Err(_) => return Vec::new(),
        };
        let lidar_world = body_world.compose(extrinsic);
        let image_id = nearest_timestamp(db_poses, scan.timestamp) as u32;
        let cam_from_world = db_poses[image_id as usize].pose.inverse();
        let mut tagged = Vec::new();
        for p in &scan.points {
            let p_world = lidar_world.transform_point(p);
            let p_cam = cam_from_world.transform_point(&p_world);
            if p_cam.norm_squared() > max_range2 {
                continue;
            }
            if geometry::project(k, &p_cam).valid {
                tagged.push((p_world, image_id));
            }
        }
        tagged
    });

    let mut points = Vec::new();
    let mut covis: Vec<Vec<u32>> = vec![Vec::new(); db_poses.len()];
    for scan_points in per_scan {
        for (p, id) in scan_points {
            let idx = points.len() as u32;
            points.push(p);
            covis[id as usize].push(idx);
        }
    }
    Ok(IndexedMap {
        points,
        covis,
        voxel_size: 0.0,
    })
}
