//! SE(3)/SO(3) algebra, the pinhole camera model, projection Jacobians and
//! pose-error metrics.
//!
//! Poses are stored as a unit quaternion plus translation and follow the
//! world-from-camera convention: the translation IS the camera center in
//! world coordinates. Twists are ordered translation-first `(rho, phi)`.
//! Pose updates elsewhere in the crate are left-multiplicative,
//! `refined = se3_exp(delta) * current`, which keeps point Jacobians
//! independent of the current translation magnitude.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default near-plane cutoff for projections, meters.
pub const Z_MIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The SO(3) log is ill-conditioned for rotations at or near pi.
    #[error("rotation angle {angle} rad is within 1e-6 of pi; log map undefined")]
    AngleNearPi { angle: f64 },
    #[error("intrinsics file: {0}")]
    BadIntrinsics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rigid transform, world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_parts(tx: f64, ty: f64, tz: f64, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz)),
            Vector3::new(tx, ty, tz),
        )
    }

    /// `self * other`, with the quaternion renormalized after the product.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Maps a point from the local (camera) frame into the world frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a world point into the local (camera) frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation.quaternion();
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) q=({:.4}, {:.4}, {:.4}, {:.4})",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// se(3) tangent element, translation-first ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// Taylor series kick in well above the float cancellation floor of the
// closed-form coefficients.
const SMALL_ANGLE: f64 = 1e-4;

/// Left Jacobian of SO(3): V such that exp((rho, phi)).translation = V * rho.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let half = 0.5 * theta;
        // (1 - cos t)/t^2 written via sin(t/2) to avoid cancellation
        let a = 2.0 * half.sin() * half.sin() / (theta * theta);
        let b = (theta - theta.sin()) / (theta * theta * theta);
        (a, b)
    };
    Matrix3::identity() + a * k + b * (k * k)
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * k + c * (k * k)
}

/// Closed-form SE(3) exponential. Rotation via the quaternion exponential,
/// translation via the SO(3) left Jacobian. Caller guarantees |phi| < pi.
pub fn se3_exp(xi: &Twist) -> Pose {
    let rotation = UnitQuaternion::from_scaled_axis(xi.phi);
    let translation = so3_left_jacobian(&xi.phi) * xi.rho;
    Pose {
        rotation,
        translation,
    }
}

/// SE(3) logarithm. Fails for rotation angles within 1e-6 of pi, where the
/// axis is not recoverable to the accuracy the rest of the crate assumes.
pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    let angle = pose.rotation.angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::AngleNearPi { angle });
    }
    let phi = pose.rotation.scaled_axis();
    let rho = so3_left_jacobian_inv(&phi) * pose.translation;
    Ok(Twist { rho, phi })
}

/// Constant-velocity interpolation between two poses: translation lerp,
/// rotation slerp. `alpha` in [0, 1].
pub fn interpolate(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    let rotation = a
        .rotation
        .try_slerp(&b.rotation, alpha, 1e-12)
        .unwrap_or(if alpha < 0.5 { a.rotation } else { b.rotation });
    Pose {
        rotation,
        translation: a.translation.lerp(&b.translation, alpha),
    }
}

/// Pinhole intrinsics. Pixel convention: `u = fx*x/z + cx` (rightward),
/// `v = fy*y/z + cy` (downward), origin at the top-left pixel center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width >= 1 && height >= 1, "image size must be at least 1x1");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Intrinsics of the same camera decimated by an integer divisor:
    /// level pixel i corresponds to full-resolution pixel `divisor * i`.
    pub fn scaled_down(&self, divisor: u32) -> CameraIntrinsics {
        let d = f64::from(divisor);
        CameraIntrinsics {
            fx: self.fx / d,
            fy: self.fy / d,
            cx: self.cx / d,
            cy: self.cy / d,
            width: div_ceil(self.width, divisor as usize),
            height: div_ceil(self.height, divisor as usize),
        }
    }

    /// Parses a `key value` per line text file. Keys fx fy cx cy width height;
    /// unknown keys are ignored.
    pub fn from_file(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, GeometryError> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap();
            let val = it.next().ok_or_else(|| {
                GeometryError::BadIntrinsics(format!("line {}: missing value", lineno + 1))
            })?;
            let parse = |v: &str| {
                v.parse::<f64>().map_err(|_| {
                    GeometryError::BadIntrinsics(format!("line {}: bad number {v:?}", lineno + 1))
                })
            };
            match key {
                "fx" => fx = Some(parse(val)?),
                "fy" => fy = Some(parse(val)?),
                "cx" => cx = Some(parse(val)?),
                "cy" => cy = Some(parse(val)?),
                "width" => width = Some(parse(val)? as usize),
                "height" => height = Some(parse(val)? as usize),
                _ => {} // unknown keys ignored
            }
        }
        let need = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| GeometryError::BadIntrinsics(format!("missing key {name}")))
        };
        let fx = need("fx", fx)?;
        let fy = need("fy", fy)?;
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        let width =
            width.ok_or_else(|| GeometryError::BadIntrinsics("missing key width".into()))?;
        let height =
            height.ok_or_else(|| GeometryError::BadIntrinsics("missing key height".into()))?;
        if width < 1 || height < 1 {
            return Err(GeometryError::BadIntrinsics(
                "image size must be >= 1".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx: need("cx", cx)?,
            cy: need("cy", cy)?,
            width,
            height,
        })
    }

    pub fn to_file_contents(&self) -> String {
        format!(
            "fx {}\nfy {}\ncx {}\ncy {}\nwidth {}\nheight {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

fn div_ceil(n: usize, d: usize) -> usize {
    (n + d - 1) / d
}

/// Projection of a camera-frame point, with the analytic Jacobian of the
/// pixel coordinates with respect to that point.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// False when z <= Z_MIN or the pixel falls outside
    /// [0, width-1] x [0, height-1]. Invalid projections are flagged,
    /// never an error.
    pub valid: bool,
}

/// Projects a camera-frame point through `k`. The uv and Jacobian are
/// computed from the raw formula whenever z is nonzero, so callers can
/// inspect where an invalid point would land.
pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Projection {
    let z = p_cam.z;
    if z == 0.0 {
        return Projection {
            uv: Vector2::zeros(),
            jacobian: Matrix2x3::zeros(),
            valid: false,
        };
    }
    let inv_z = 1.0 / z;
    let u = k.fx * p_cam.x * inv_z + k.cx;
    let v = k.fy * p_cam.y * inv_z + k.cy;
    let jacobian = Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * p_cam.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * p_cam.y * inv_z * inv_z,
    );
    let in_bounds =
        u >= 0.0 && u <= (k.width - 1) as f64 && v >= 0.0 && v <= (k.height - 1) as f64;
    Projection {
        uv: Vector2::new(u, v),
        jacobian,
        valid: z > Z_MIN && in_bounds,
    }
}

/// Translation error (distance between camera centers, meters) and rotation
/// error (angle of `R_est * R_gt^T`, degrees).
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    let trans = (est.center() - gt.center()).norm();
    let rot = (est.rotation * gt.rotation.inverse()).angle().to_degrees();
    (trans, rot)
}
