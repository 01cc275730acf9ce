//! Ground-truth trajectory generation: a closed loop of straight segments
//! with rounded corners, parameterized exactly by arc length. Database
//! poses sit uniformly along the loop, the dense trajectory samples it at a
//! fixed step, and query poses are path poses with seeded lateral and
//! heading perturbations.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geometry::Pose;
use crate::mapcloud::TimedPose;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Exact total loop length, meters; the waypoint layout is rescaled to
    /// match it.
    pub loop_length: f64,
    /// Corners of the loop polygon when `waypoints` is not given.
    pub waypoint_count: u32,
    /// Width/height ratio of the default rectangle-ish layout.
    pub aspect: f64,
    /// Corner rounding radius, meters (pre-rescale).
    pub corner_radius: f64,
    /// Loop center in the world x-y plane.
    pub center: [f64; 2],
    /// Camera height above the floor, meters.
    pub height: f64,
    /// Camera pitch, degrees; negative tilts the view toward the floor,
    /// which puts near-field points in frame and conditions the refinement.
    pub pitch_deg: f64,
    /// Platform speed, m/s; fixes all timestamps.
    pub speed: f64,
    /// Database image spacing along the loop, meters. The image count is
    /// round(loop_length / image_spacing) and the actual spacing is exactly
    /// loop_length / count.
    pub image_spacing: f64,
    /// Dense trajectory / scan spacing along the loop, meters.
    pub lidar_step: f64,
    pub query_count: u32,
    /// Max lateral offset of query poses from the path, meters.
    pub query_lateral: f64,
    /// Max heading perturbation of query poses, degrees.
    pub query_yaw_deg: f64,
    /// Explicit loop polygon override (world x-y); used for layouts that
    /// must thread doorways. Still rescaled to `loop_length`.
    pub waypoints: Option<Vec<[f64; 2]>>,
}

impl TrajectorySpec {
    pub fn rectangle(loop_length: f64, center: [f64; 2]) -> Self {
        Self {
            loop_length,
            waypoint_count: 4,
            aspect: 12.0 / 7.0,
            corner_radius: 1.0,
            center,
            height: 1.2,
            pitch_deg: -12.0,
            speed: 0.5,
            image_spacing: loop_length / 30.0,
            lidar_step: 0.05,
            query_count: 100,
            query_lateral: 0.3,
            query_yaw_deg: 4.0,
            waypoints: None,
        }
    }
}

/// Piecewise path: straight segments and circular arcs, arc-length indexed.
struct PathPiece {
    start_s: f64,
    len: f64,
    kind: PieceKind,
}

enum PieceKind {
    Line {
        from: Vector2<f64>,
        dir: Vector2<f64>,
    },
    Arc {
        center: Vector2<f64>,
        radius: f64,
        start_angle: f64,
        /// signed sweep, radians
        sweep: f64,
    },
}

struct LoopPath {
    pieces: Vec<PathPiece>,
    total: f64,
}

impl LoopPath {
    /// Position and unit tangent at arc length s (wrapped into [0, total]).
    fn eval(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.clamp(0.0, self.total);
        let idx = self
            .pieces
            .partition_point(|p| p.start_s + p.len < s)
            .min(self.pieces.len() - 1);
        let piece = &self.pieces[idx];
        let local = (s - piece.start_s).clamp(0.0, piece.len);
        match &piece.kind {
            PieceKind::Line { from, dir } => (from + dir * local, *dir),
            PieceKind::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let angle = start_angle + sweep.signum() * local / radius;
                let pos = center + Vector2::new(angle.cos(), angle.sin()) * *radius;
                let tangent = Vector2::new(-angle.sin(), angle.cos()) * sweep.signum();
                (pos, tangent)
            }
        }
    }
}

fn build_loop(
    waypoints: &[Vector2<f64>],
    corner_radius: f64,
) -> Result<LoopPath, SynthError> {
    let n = waypoints.len();
    if n < 3 {
        return Err(SynthError::InvalidSpec("loop needs at least 3 waypoints".into()));
    }
    // For each corner compute the tangent trim distance d = r tan(theta/2).
    let mut trims = vec![0.0; n];
    let mut radii = vec![corner_radius; n];
    for i in 0..n {
        let prev = waypoints[(i + n - 1) % n];
        let here = waypoints[i];
        let next = waypoints[(i + 1) % n];
        let a = (here - prev).normalize();
        let b = (next - here).normalize();
        let cos_turn = a.dot(&b).clamp(-1.0, 1.0);
        let turn = cos_turn.acos();
        if turn < 1e-9 {
            radii[i] = 0.0;
            trims[i] = 0.0;
            continue;
        }
        let mut r = corner_radius;
        let mut d = r * (turn / 2.0).tan();
        // shrink the radius if the trim would eat a whole edge
        let max_d = 0.45 * (here - prev).norm().min((next - here).norm());
        if d > max_d {
            d = max_d;
            r = d / (turn / 2.0).tan();
        }
        radii[i] = r;
        trims[i] = d;
    }

    let mut pieces = Vec::new();
    let mut s = 0.0;
    for i in 0..n {
        let here = waypoints[i];
        let next = waypoints[(i + 1) % n];
        let j = (i + 1) % n;
        let dir = (next - here).normalize();
        let from = here + dir * trims[i];
        let to = next - dir * trims[j];
        let line_len = (to - from).norm();
        if line_len > 1e-12 {
            pieces.push(PathPiece {
                start_s: s,
                len: line_len,
                kind: PieceKind::Line { from, dir },
            });
            s += line_len;
        }
        // arc around corner j
        let after = waypoints[(j + 1) % n];
        let a = dir;
        let b = (after - next).normalize();
        let turn = a.dot(&b).clamp(-1.0, 1.0).acos();
        if turn < 1e-9 || radii[j] <= 0.0 {
            continue;
        }
        let cross = a.x * b.y - a.y * b.x; // left turn positive
        let sign = if cross >= 0.0 { 1.0 } else { -1.0 };
        let r = radii[j];
        let entry = next - a * trims[j];
        let normal_in = Vector2::new(-a.y, a.x) * sign; // toward the arc center
        let center = entry + normal_in * r;
        let start_angle = {
            let v = entry - center;
            v.y.atan2(v.x)
        };
        let arc_len = r * turn;
        pieces.push(PathPiece {
            start_s: s,
            len: arc_len,
            kind: PieceKind::Arc {
                center,
                radius: r,
                start_angle,
                sweep: sign * turn,
            },
        });
        s += arc_len;
    }
    Ok(LoopPath { pieces, total: s })
}

fn default_waypoints(spec: &TrajectorySpec) -> Vec<Vector2<f64>> {
    let n = spec.waypoint_count.max(3) as usize;
    if n == 4 {
        // rectangle honoring the aspect ratio, perimeter rescaled later
        let a = spec.aspect.max(0.2);
        let (hw, hh) = (a / 2.0, 0.5);
        vec![
            Vector2::new(-hw, -hh),
            Vector2::new(hw, -hh),
            Vector2::new(hw, hh),
            Vector2::new(-hw, hh),
        ]
    } else {
        (0..n)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Vector2::new(spec.aspect.max(0.2) * angle.cos() / 2.0, angle.sin() / 2.0)
            })
            .collect()
    }
}

/// Camera pose on the path: z forward along the tangent, y down, x right,
/// then pitched about the camera x axis.
fn path_pose(
    pos: Vector2<f64>,
    tangent: Vector2<f64>,
    height: f64,
    yaw_offset: f64,
    pitch_deg: f64,
) -> Pose {
    let t = {
        let c = yaw_offset.cos();
        let s = yaw_offset.sin();
        Vector2::new(c * tangent.x - s * tangent.y, s * tangent.x + c * tangent.y)
    };
    let forward = Vector3::new(t.x, t.y, 0.0);
    let right = Vector3::new(t.y, -t.x, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let rot = Matrix3::from_columns(&[right, down, forward]);
    let base = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let pitch = UnitQuaternion::from_scaled_axis(right * pitch_deg.to_radians());
    Pose::new(pitch * base, Vector3::new(pos.x, pos.y, height))
}

/// Length of the rounded-corner loop through `waypoints` without any
/// rescaling. Lets callers pin `loop_length` to the natural value so
/// absolute waypoint coordinates (doorways, wall clearances) are preserved.
pub fn natural_loop_length(
    waypoints: &[[f64; 2]],
    corner_radius: f64,
) -> Result<f64, SynthError> {
    let pts: Vec<Vector2<f64>> = waypoints.iter().map(|p| Vector2::new(p[0], p[1])).collect();
    Ok(build_loop(&pts, corner_radius)?.total)
}

/// Generated trajectories: the dense platform path plus database and query
/// camera poses, all world-from-camera with strictly increasing timestamps.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub dense: Vec<TimedPose>,
    pub db: Vec<TimedPose>,
    pub queries: Vec<TimedPose>,
    /// Exact loop length after rescaling, meters.
    pub loop_length: f64,
}

pub fn generate_trajectory(
    spec: &TrajectorySpec,
    seed: u64,
) -> Result<TrajectoryBundle, SynthError> {
    if spec.loop_length <= 0.0
        || spec.speed <= 0.0
        || spec.image_spacing <= 0.0
        || spec.lidar_step <= 0.0
    {
        return Err(SynthError::InvalidSpec(
            "loop length, speed, image spacing and lidar step must be positive".into(),
        ));
    }
    let raw: Vec<Vector2<f64>> = match &spec.waypoints {
        Some(w) => w.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
        None => default_waypoints(spec),
    };
    // Scale the layout (and corner radius) so the rounded loop length is
    // exactly loop_length; lengths scale linearly with the layout.
    let probe = build_loop(&raw, spec.corner_radius)?;
    let scale = spec.loop_length / probe.total;
    let scaled: Vec<Vector2<f64>> = raw.iter().map(|p| p * scale).collect();
    let path = build_loop(&scaled, spec.corner_radius * scale)?;
    debug_assert!((path.total - spec.loop_length).abs() < 1e-9 * spec.loop_length.max(1.0));
    let total = path.total;
    let center = Vector2::new(spec.center[0], spec.center[1]);

    let pose_at = |s: f64, yaw: f64| {
        let (pos, tangent) = path.eval(s);
        path_pose(pos + center, tangent, spec.height, yaw, spec.pitch_deg)
    };

    // dense platform trajectory, endpoint included so the loop closes
    let steps = (total / spec.lidar_step).ceil().max(1.0) as usize;
    let dense: Vec<TimedPose> = (0..=steps)
        .map(|i| {
            let s = total * i as f64 / steps as f64;
            TimedPose {
                timestamp: s / spec.speed,
                pose: pose_at(s, 0.0),
            }
        })
        .collect();

    // database poses, uniform by arc length
    let db_count = (spec.loop_length / spec.image_spacing).round().max(1.0) as usize;
    let db: Vec<TimedPose> = (0..db_count)
        .map(|i| {
            let s = total * i as f64 / db_count as f64;
            TimedPose {
                timestamp: s / spec.speed,
                pose: pose_at(s, 0.0),
            }
        })
        .collect();

    // query poses: sorted random arc positions with lateral/heading offsets
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_c0de_ba5e_0001);
    let mut arc_positions: Vec<f64> = (0..spec.query_count)
        .map(|_| rng.gen_range(0.0..total))
        .collect();
    arc_positions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let queries: Vec<TimedPose> = arc_positions
        .iter()
        .map(|&s| {
            let lateral = rng.gen_range(-spec.query_lateral..=spec.query_lateral);
            let yaw = rng
                .gen_range(-spec.query_yaw_deg..=spec.query_yaw_deg)
                .to_radians();
            let (pos, tangent) = path.eval(s);
            let right = Vector2::new(tangent.y, -tangent.x);
            let offset_pos = pos + center + right * lateral;
            TimedPose {
                timestamp: s / spec.speed,
                pose: path_pose(offset_pos, tangent, spec.height, yaw, spec.pitch_deg),
            }
        })
        .collect();

    Ok(TrajectoryBundle {
        dense,
        db,
        queries,
        loop_length: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk_spec() -> TrajectorySpec {
        TrajectorySpec::rectangle(38.0, [6.7, 4.2])
    }

    #[test]
    fn loop_is_closed() {
        let bundle = generate_trajectory(&desk_spec(), 0).unwrap();
        let first = bundle.dense.first().unwrap().pose.translation;
        let last = bundle.dense.last().unwrap().pose.translation;
        assert!((first - last).norm() < 1e-9);
        assert_relative_eq!(bundle.loop_length, 38.0, epsilon = 1e-9);
    }

    #[test]
    fn db_poses_uniform_spacing_38_over_30() {
        let bundle = generate_trajectory(&desk_spec(), 0).unwrap();
        assert_eq!(bundle.db.len(), 30);
        // consecutive arc spacing is exactly 38/30; chord length approaches
        // it on straights, so check timestamps (exact arc length / speed)
        let spacing = 38.0 / 30.0;
        for pair in bundle.db.windows(2) {
            let dt = pair[1].timestamp - pair[0].timestamp;
            assert_relative_eq!(dt * desk_spec().speed, spacing, epsilon = 1e-6);
        }
    }

    #[test]
    fn timestamps_strictly_increase() {
        let bundle = generate_trajectory(&desk_spec(), 3).unwrap();
        for traj in [&bundle.dense, &bundle.db] {
            for pair in traj.windows(2) {
                assert!(pair[1].timestamp > pair[0].timestamp);
            }
        }
        for pair in bundle.queries.windows(2) {
            assert!(pair[1].timestamp >= pair[0].timestamp);
        }
    }

    #[test]
    fn query_offsets_respect_configured_bounds() {
        let mut spec = desk_spec();
        spec.query_count = 1000;
        let bundle = generate_trajectory(&spec, 17).unwrap();
        assert_eq!(bundle.queries.len(), 1000);
        // every query within query_lateral of the dense path (sampled finely)
        let mut max_lateral: f64 = 0.0;
        let mut any_above_half: usize = 0;
        for q in &bundle.queries {
            let qpos = q.pose.translation;
            let nearest = bundle
                .dense
                .iter()
                .map(|tp| (tp.pose.translation - qpos).norm())
                .fold(f64::INFINITY, f64::min);
            max_lateral = max_lateral.max(nearest);
            if nearest > 0.5 * spec.query_lateral {
                any_above_half += 1;
            }
        }
        // dense sampling is 5 cm so allow a small slack
        assert!(max_lateral <= spec.query_lateral + 0.05, "max {max_lateral}");
        // offsets are uniform: a decent share exceeds half the bound
        assert!(any_above_half > 200, "got {any_above_half}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_trajectory(&desk_spec(), 5).unwrap();
        let b = generate_trajectory(&desk_spec(), 5).unwrap();
        assert_eq!(a.queries.len(), b.queries.len());
        for (x, y) in a.queries.iter().zip(&b.queries) {
            assert_eq!(x.pose.translation, y.pose.translation);
            assert_eq!(x.timestamp, y.timestamp);
        }
        let c = generate_trajectory(&desk_spec(), 6).unwrap();
        assert_ne!(
            a.queries[0].pose.translation,
            c.queries[0].pose.translation
        );
    }

    #[test]
    fn camera_axes_follow_the_path() {
        let spec = desk_spec();
        let bundle = generate_trajectory(&spec, 0).unwrap();
        let pitch = spec.pitch_deg.to_radians();
        for tp in &bundle.dense {
            let r = tp.pose.rotation_matrix();
            // x column stays horizontal (pitch is about it); the forward
            // column dips by exactly the configured pitch
            assert_relative_eq!(r.column(0).z, 0.0, epsilon = 1e-9);
            assert_relative_eq!(r.column(2).z, pitch.sin(), epsilon = 1e-9);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn explicit_waypoints_are_honored() {
        let mut spec = desk_spec();
        spec.waypoints = Some(vec![[0.0, 0.0], [4.0, 0.0], [4.0, 3.0], [0.0, 3.0]]);
        spec.loop_length = 14.0; // perimeter of the rectangle
        spec.corner_radius = 0.5;
        spec.center = [0.0, 0.0];
        let bundle = generate_trajectory(&spec, 1).unwrap();
        assert_relative_eq!(bundle.loop_length, 14.0, epsilon = 1e-9);
        // all positions inside the (rescaled) rectangle hull
        for tp in &bundle.dense {
            let t = tp.pose.translation;
            assert!(t.x > -0.6 && t.y > -0.6);
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = desk_spec();
        spec.loop_length = -1.0;
        assert!(generate_trajectory(&spec, 0).is_err());
    }
}
