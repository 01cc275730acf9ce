//! Feature-metric 6-DoF pose refinement.
//!
//! Reference descriptors are attached to co-visible map points by sampling
//! the database image's pyramid at the points' projections. Refinement then
//! minimizes robust query-feature residuals over SE(3), coarse to fine:
//! at each level the residual of point `p` with reference `d` is
//! `F_q(pi(W^-1 p)) - d` for the current world-from-camera pose `W`, the
//! cost is the Huber-robustified sum over points, and Levenberg-Marquardt
//! steps `(J^T W J + lambda diag(J^T W J)) delta = -J^T W r` are applied
//! left-multiplicatively, `W <- se3_exp(delta) * W`. Points that project
//! out of bounds are dropped for that iteration and return when the pose
//! brings them back.

use nalgebra::{Matrix3x6, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::features::{self, FeatureError, FeaturePyramid, GrayImage};
use crate::geometry::{self, se3_exp, CameraIntrinsics, Pose, Twist};
use crate::mapcloud::{IndexedMap, MapError};
use crate::retrieval::{self, DescriptorKind, RetrievalDatabase, RetrievalError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("only {got} usable observations, need at least {need}")]
    InsufficientObservations { got: usize, need: usize },
    #[error("normal equations singular even after damping escalation")]
    SingularSystem,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A 3D point with its per-level reference feature vectors, sampled from
/// the database image pyramid at the point's projection.
#[derive(Debug, Clone)]
pub struct ReferenceObservation {
    pub point_w: Vector3<f64>,
    /// One feature vector per pyramid level, coarse to fine.
    pub ref_features: Vec<Vector3<f64>>,
}

/// Levenberg-Marquardt configuration. The defaults converge on noiseless
/// synthetic data well within the iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub max_iters_per_level: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Huber threshold on the per-point residual norm, feature units.
    pub huber_delta: f64,
    /// Relative weight of the gradient channels against intensity.
    /// Image gradients are not viewpoint-invariant (they rescale and
    /// rotate with the depth-dependent zoom between the database and
    /// query views), so they are down-weighted in the residual while
    /// still sharpening the cost surface where texture is strong.
    pub gradient_weight: f64,
    pub step_tol: f64,
    pub cost_tol: f64,
    pub min_points: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters_per_level: 100,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.5,
            huber_delta: 0.5,
            gradient_weight: 0.25,
            step_tol: 1e-8,
            cost_tol: 1e-9,
            min_points: 10,
        }
    }
}

impl SolverConfig {
    fn validate(&self) {
        assert!(self.max_iters_per_level > 0);
        assert!(self.lambda_init > 0.0);
        assert!(self.lambda_up > 1.0, "lambda_up must exceed 1");
        assert!(
            self.lambda_down > 0.0 && self.lambda_down < 1.0,
            "lambda_down must be in (0, 1)"
        );
        assert!(self.huber_delta > 0.0);
        assert!(self.gradient_weight >= 0.0);
        assert!(self.step_tol > 0.0 && self.cost_tol > 0.0);
        assert!(self.min_points > 0);
    }
}

/// Refinement output: the pose plus convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub pose: Pose,
    /// Every level reached a stationary point: it stopped on the step or
    /// cost tolerance, or no damping level produced a further improving
    /// step. False when any level exhausted its iteration budget while
    /// still descending.
    pub converged: bool,
    /// Mean Huber cost over the active set at the final state of the
    /// finest level.
    pub final_cost: f64,
    /// LM iterations run per level, coarse to fine.
    pub iterations: Vec<u32>,
    /// In-bounds observation count at the final state of each level.
    pub inlier_counts: Vec<u32>,
    /// Accepted costs per level, strictly decreasing within a level.
    pub cost_trace: Vec<Vec<f64>>,
    /// Filled by [`localize`]; `None` out of plain [`refine_pose`].
    pub retrieved_image: Option<u32>,
    pub retrieval_similarity: Option<f64>,
}

/// Projects the co-visible points of `image_id` into the database image and
/// samples its pyramid at every level. Points must be sampleable at ALL
/// levels to yield an observation.
pub fn make_reference_observations(
    map: &IndexedMap,
    image_id: u32,
    db_pose: &Pose,
    k: &CameraIntrinsics,
    db_pyramid: &FeaturePyramid,
    min_points: usize,
) -> Result<Vec<ReferenceObservation>, SolveError> {
    let covisible = map.covisible_points(image_id)?;
    let cam_from_world = db_pose.inverse();
    let mut observations = Vec::with_capacity(covisible.len());
    for (_, point_w) in covisible {
        let p_cam = cam_from_world.transform_point(&point_w);
        if let Some(ref_features) = sample_all_levels(db_pyramid, k, &p_cam) {
            observations.push(ReferenceObservation {
                point_w,
                ref_features,
            });
        }
    }
    if observations.len() < min_points {
        return Err(SolveError::InsufficientObservations {
            got: observations.len(),
            need: min_points,
        });
    }
    Ok(observations)
}

/// Feature vectors at every level for a camera-frame point, or None if any
/// level rejects it (behind the near plane or outside the sample margin).
fn sample_all_levels(
    pyramid: &FeaturePyramid,
    k: &CameraIntrinsics,
    p_cam: &Vector3<f64>,
) -> Option<Vec<Vector3<f64>>> {
    let mut features = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        if p_cam.z <= geometry::Z_MIN {
            return None;
        }
        let k_level = k.scaled_down(level.scale);
        let u = k_level.fx * p_cam.x / p_cam.z + k_level.cx;
        let v = k_level.fy * p_cam.y / p_cam.z + k_level.cy;
        match level.sample(&Vector2::new(u, v)) {
            Ok((f, _)) => features.push(f),
            Err(_) => return None,
        }
    }
    Some(features)
}

/// Residual, Jacobian and Huber weight of one observation at one level.
struct PointEval {
    residual: Vector3<f64>,
    jacobian: Matrix3x6<f64>,
    weight: f64,
}

/// Evaluation of a level's active set at some pose. The cost is the MEAN
/// Huber residual over the active set: points drop out per iteration when
/// they project outside the image, and a mean keeps costs comparable
/// across active sets of different size (a raw sum would reward steps that
/// push points out of bounds).
struct LevelState {
    evals: Vec<PointEval>,
    cost: f64,
}

/// Huber rho on the residual norm and the matching IRLS weight.
fn huber(norm: f64, delta: f64) -> (f64, f64) {
    if norm <= delta {
        (0.5 * norm * norm, 1.0)
    } else {
        (delta * (norm - 0.5 * delta), delta / norm)
    }
}

/// Jacobian of the camera-frame point w.r.t. the left-multiplicative twist:
/// d(W^-1 p)/d(delta) = [-R^T | R^T [p]_x], independent of the translation.
fn point_twist_jacobian(pose: &Pose, p_world: &Vector3<f64>) -> Matrix3x6<f64> {
    let rt = pose.rotation_matrix().transpose();
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(rt * geometry::skew(p_world)));
    j
}

/// Raw residuals and Jacobians of the in-bounds subset of `observations`
/// at `pose`, for pyramid `level_idx`.
fn collect_raw(
    pose: &Pose,
    observations: &[ReferenceObservation],
    query_pyramid: &FeaturePyramid,
    k: &CameraIntrinsics,
    level_idx: usize,
    channel_scale: &Vector3<f64>,
) -> Vec<(Vector3<f64>, Matrix3x6<f64>)> {
    let level = &query_pyramid.levels[level_idx];
    let k_level = k.scaled_down(level.scale);
    let cam_from_world = pose.inverse();
    let mut raw = Vec::with_capacity(observations.len());
    for obs in observations {
        let p_cam = cam_from_world.transform_point(&obs.point_w);
        if p_cam.z <= geometry::Z_MIN {
            continue;
        }
        let projection = geometry::project(&k_level, &p_cam);
        let (feature, grad) = match level.sample(&projection.uv) {
            Ok(s) => s,
            Err(_) => continue, // dropped this iteration, may return later
        };
        let mut residual = feature - obs.ref_features[level_idx];
        let mut jacobian = grad * projection.jacobian * point_twist_jacobian(pose, &obs.point_w);
        for c in 0..3 {
            residual[c] *= channel_scale[c];
            for col in 0..6 {
                jacobian[(c, col)] *= channel_scale[c];
            }
        }
        raw.push((residual, jacobian));
    }
    raw
}

/// Per-channel median of the raw residuals: the marginalized global
/// photometric offset between the query and database feature channels
/// (their standardizations are computed over different image content, so
/// a constant per-channel shift is expected and carries no pose signal).
fn residual_offset(raw: &[(Vector3<f64>, Matrix3x6<f64>)]) -> Vector3<f64> {
    if raw.is_empty() {
        return Vector3::zeros();
    }
    let mut offset = Vector3::zeros();
    let mut scratch: Vec<f64> = Vec::with_capacity(raw.len());
    for c in 0..3 {
        scratch.clear();
        scratch.extend(raw.iter().map(|(r, _)| r[c]));
        let mid = (scratch.len() - 1) / 2;
        let (_, median, _) =
            scratch.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
        offset[c] = *median;
    }
    offset
}

/// Evaluates offset-centered residuals, Jacobians and the robust cost of
/// the in-bounds subset of `observations` at `pose`.
fn evaluate_level(
    pose: &Pose,
    observations: &[ReferenceObservation],
    query_pyramid: &FeaturePyramid,
    k: &CameraIntrinsics,
    level_idx: usize,
    huber_delta: f64,
    gradient_weight: f64,
) -> LevelState {
    let scale = Vector3::new(1.0, gradient_weight, gradient_weight);
    let raw = collect_raw(pose, observations, query_pyramid, k, level_idx, &scale);
    let offset = residual_offset(&raw);
    let mut evals = Vec::with_capacity(raw.len());
    let mut cost = 0.0;
    for (residual, jacobian) in raw {
        let centered = residual - offset;
        let (rho, weight) = huber(centered.norm(), huber_delta);
        cost += rho;
        evals.push(PointEval {
            residual: centered,
            jacobian,
            weight,
        });
    }
    if !evals.is_empty() {
        cost /= evals.len() as f64;
    }
    LevelState { evals, cost }
}

fn normal_equations(state: &LevelState) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for e in &state.evals {
        let jt = e.jacobian.transpose();
        h += e.weight * jt * e.jacobian;
        g += e.weight * jt * e.residual;
    }
    (h, g)
}

fn solve_damped(h: &Matrix6<f64>, g: &Vector6<f64>, lambda: f64) -> Option<Vector6<f64>> {
    let mut damped = *h;
    for i in 0..6 {
        damped[(i, i)] += lambda * h[(i, i)];
        // keep the system solvable along directions with no excitation
        if damped[(i, i)] == 0.0 {
            damped[(i, i)] = lambda.max(1e-12);
        }
    }
    damped.cholesky().map(|chol| chol.solve(&(-g)))
}

/// Refines `init` against the reference observations over all pyramid
/// levels, coarse to fine, with full convergence per level.
pub fn refine_pose(
    init: &Pose,
    observations: &[ReferenceObservation],
    query_pyramid: &FeaturePyramid,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<LocalizationResult, SolveError> {
    cfg.validate();
    if observations.len() < cfg.min_points {
        return Err(SolveError::InsufficientObservations {
            got: observations.len(),
            need: cfg.min_points,
        });
    }
    let level_count = query_pyramid.levels.len();
    debug_assert!(observations
        .iter()
        .all(|o| o.ref_features.len() == level_count));

    let mut pose = *init;
    let mut iterations = vec![0u32; level_count];
    let mut inlier_counts = vec![0u32; level_count];
    let mut cost_trace: Vec<Vec<f64>> = vec![Vec::new(); level_count];
    let mut all_converged = true;

    for level_idx in 0..level_count {
        let mut state = evaluate_level(
            &pose,
            observations,
            query_pyramid,
            k,
            level_idx,
            cfg.huber_delta,
            cfg.gradient_weight,
        );
        if state.evals.len() < cfg.min_points {
            return Err(SolveError::InsufficientObservations {
                got: state.evals.len(),
                need: cfg.min_points,
            });
        }
        let mut lambda = cfg.lambda_init;
        let mut level_converged = false;

        'iterations: for _ in 0..cfg.max_iters_per_level {
            iterations[level_idx] += 1;
            let (h, g) = normal_equations(&state);
            let mut rejections = 0;
            loop {
                let delta = match solve_damped(&h, &g, lambda) {
                    Some(d) => d,
                    None => {
                        lambda *= cfg.lambda_up;
                        rejections += 1;
                        if rejections > 10 {
                            return Err(SolveError::SingularSystem);
                        }
                        continue;
                    }
                };
                if delta.norm() < cfg.step_tol {
                    // at a stationary point for this level
                    level_converged = true;
                    break 'iterations;
                }
                let twist = Twist::from_slice(&[
                    delta[0], delta[1], delta[2], delta[3], delta[4], delta[5],
                ]);
                let trial_pose = se3_exp(&twist).compose(&pose);
                let trial = evaluate_level(
                    &trial_pose,
                    observations,
                    query_pyramid,
                    k,
                    level_idx,
                    cfg.huber_delta,
                    cfg.gradient_weight,
                );
                if trial.evals.len() < cfg.min_points {
                    return Err(SolveError::InsufficientObservations {
                        got: trial.evals.len(),
                        need: cfg.min_points,
                    });
                }
                if trial.cost < state.cost {
                    let improvement = state.cost - trial.cost;
                    pose = trial_pose;
                    state = trial;
                    cost_trace[level_idx].push(state.cost);
                    lambda = (lambda * cfg.lambda_down).max(1e-12);
                    if delta.norm() < cfg.step_tol || improvement < cfg.cost_tol {
                        level_converged = true;
                        break 'iterations;
                    }
                    break; // next iteration
                }
                lambda *= cfg.lambda_up;
                rejections += 1;
                if rejections > 10 {
                    // no damping level yields an improving step: the level
                    // is stationary within the data's noise resolution
                    level_converged = true;
                    break 'iterations;
                }
            }
        }

        inlier_counts[level_idx] = state.evals.len() as u32;
        all_converged &= level_converged;
        if level_idx == level_count - 1 {
            return Ok(LocalizationResult {
                pose,
                converged: all_converged,
                final_cost: state.cost,
                iterations,
                inlier_counts,
                cost_trace,
                retrieved_image: None,
                retrieval_similarity: None,
            });
        }
    }
    unreachable!("loop returns at the finest level")
}

/// Public raw residual/Jacobian evaluation at one level (no offset
/// centering, no robust weighting), for diagnostics and derivative checks.
pub fn residuals_and_jacobians(
    pose: &Pose,
    observations: &[ReferenceObservation],
    query_pyramid: &FeaturePyramid,
    k: &CameraIntrinsics,
    level_idx: usize,
) -> Vec<(Vector3<f64>, Matrix3x6<f64>)> {
    collect_raw(
        pose,
        observations,
        query_pyramid,
        k,
        level_idx,
        &Vector3::new(1.0, 1.0, 1.0),
    )
}

/// Everything localization needs besides the query itself. `db_images` are
/// indexed by image id (dense, filename-sorted at load time).
pub struct LocalizeContext<'a> {
    pub db: &'a RetrievalDatabase,
    pub map: &'a IndexedMap,
    pub intrinsics: &'a CameraIntrinsics,
    pub db_images: &'a [GrayImage],
    pub pyramid: features::PyramidParams,
    pub solver: SolverConfig,
}

/// Full single-query pipeline: top-1 retrieval, reference observations
/// through the retrieved image, LM refinement initialized at that image's
/// pose.
pub fn localize(
    query_image: &GrayImage,
    ctx: &LocalizeContext,
) -> Result<LocalizationResult, SolveError> {
    let query_descriptor = retrieval::compute_descriptor(query_image, ctx.db.kind)?;
    let top = retrieval::query_top_k(ctx.db, &query_descriptor, 1)?;
    let (image_id, similarity) = top[0];
    let db_pyramid = build_db_pyramid(ctx, image_id)?;
    localize_refined(query_image, ctx, image_id, similarity, &db_pyramid)
}

fn build_db_pyramid(ctx: &LocalizeContext, image_id: u32) -> Result<FeaturePyramid, SolveError> {
    let image = ctx
        .db_images
        .get(image_id as usize)
        .ok_or(MapError::UnknownImageId {
            id: image_id,
            count: ctx.db_images.len() as u32,
        })?;
    Ok(features::build_pyramid(
        image,
        ctx.pyramid.levels,
        ctx.pyramid.sigma,
    )?)
}

fn localize_refined(
    query_image: &GrayImage,
    ctx: &LocalizeContext,
    image_id: u32,
    similarity: f64,
    db_pyramid: &FeaturePyramid,
) -> Result<LocalizationResult, SolveError> {
    let db_pose = ctx.db.entries[image_id as usize].timed_pose.pose;
    let observations = make_reference_observations(
        ctx.map,
        image_id,
        &db_pose,
        ctx.intrinsics,
        db_pyramid,
        ctx.solver.min_points,
    )?;
    let query_pyramid =
        features::build_pyramid(query_image, ctx.pyramid.levels, ctx.pyramid.sigma)?;
    let mut result = refine_pose(
        &db_pose,
        &observations,
        &query_pyramid,
        ctx.intrinsics,
        &ctx.solver,
    )?;
    result.retrieved_image = Some(image_id);
    result.retrieval_similarity = Some(similarity);
    Ok(result)
}

/// Batch localization over many queries, in parallel, with database
/// pyramids built once per retrieved image. Output order matches input
/// order; failures are reported per query.
pub fn localize_batch(
    queries: &[GrayImage],
    ctx: &LocalizeContext,
) -> Vec<Result<LocalizationResult, SolveError>> {
    use std::collections::HashMap;
    use std::sync::Mutex;

    let cache: Mutex<HashMap<u32, std::sync::Arc<FeaturePyramid>>> = Mutex::new(HashMap::new());
    crate::parallel::map_slice(queries, |query| {
        let descriptor = retrieval::compute_descriptor(query, ctx.db.kind)?;
        let top = retrieval::query_top_k(ctx.db, &descriptor, 1)?;
        let (image_id, similarity) = top[0];
        let pyramid = {
            let mut cache = cache.lock().expect("pyramid cache poisoned");
            match cache.get(&image_id) {
                Some(p) => p.clone(),
                None => {
                    let p = std::sync::Arc::new(build_db_pyramid(ctx, image_id)?);
                    cache.insert(image_id, p.clone());
                    p
                }
            }
        };
        localize_refined(query, ctx, image_id, similarity, &pyramid)
    })
}

/// One-line structured diagnostics record for a query.
#[derive(Debug, serde::Serialize)]
pub struct Diagnostics<'a> {
    pub query: &'a str,
    pub timestamp: f64,
    pub retrieved_image: Option<u32>,
    pub similarity: Option<f64>,
    pub converged: bool,
    pub final_cost: f64,
    pub iterations: &'a [u32],
    pub inliers: &'a [u32],
    pub pose_tum: String,
    /// Retrieval candidates (id, similarity) beyond top-1 when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<(u32, f64)>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_pyramid;
    use crate::geometry::{pose_error, se3_exp, Twist};
    use crate::synth::{generate_scene, render_image, SceneSpec};
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A camera inside a textured box looking at the far wall, with the
    /// reference features sampled from the camera's own pyramid at the
    /// ground-truth pose: the optimum is exactly the ground truth with zero
    /// residual.
    struct Fixture {
        gt: Pose,
        k: CameraIntrinsics,
        pyramid: FeaturePyramid,
        observations: Vec<ReferenceObservation>,
    }

    fn fixture(seed: u64, n_points: usize) -> Fixture {
        let scene = generate_scene(
            &SceneSpec {
                panel_density: 0.2,
                ..SceneSpec::room([8.0, 6.0, 3.0])
            },
            seed,
        )
        .unwrap();
        // camera at mid-room looking along +x
        let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
        ));
        let gt = Pose::new(rot, Vector3::new(2.0, 3.0, 1.4));
        let k = CameraIntrinsics::new(277.1, 277.1, 159.5, 119.5, 320, 240);
        let image = render_image(&scene, &gt, &k);
        let pyramid = build_pyramid(&image, 3, 1.0).unwrap();

        // world points: ray-cast hits through a pixel grid
        let mut observations = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        while observations.len() < n_points {
            let u = rng.gen_range(12.0..(k.width as f64 - 12.0));
            let v = rng.gen_range(12.0..(k.height as f64 - 12.0));
            let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalize();
            let dir = gt.rotation * dir_cam;
            if let Some(hit) = scene.raycast(&gt.translation, &dir) {
                let point_w = gt.translation + dir * hit.distance;
                let p_cam = gt.inverse_transform_point(&point_w);
                if let Some(ref_features) = sample_all_levels(&pyramid, &k, &p_cam) {
                    observations.push(ReferenceObservation {
                        point_w,
                        ref_features,
                    });
                }
            }
        }
        Fixture {
            gt,
            k,
            pyramid,
            observations,
        }
    }

    /// Offsets the camera center by exactly `trans` meters and the
    /// orientation by exactly `rot_deg` degrees (rotation about the
    /// center, so the two perturbations do not compound).
    fn perturb(pose: &Pose, trans: f64, rot_deg: f64, rng: &mut ChaCha8Rng) -> Pose {
        let dir = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        Pose::new(
            UnitQuaternion::from_scaled_axis(axis * rot_deg.to_radians()) * pose.rotation,
            pose.translation + dir * trans,
        )
    }

    #[test]
    fn refine_at_ground_truth_is_a_fixed_point() {
        let f = fixture(1, 150);
        let result = refine_pose(
            &f.gt,
            &f.observations,
            &f.pyramid,
            &f.k,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(result.converged);
        assert!(result.final_cost < 1e-12, "cost {}", result.final_cost);
        assert!(result.iterations.iter().all(|&n| n <= 2), "{:?}", result.iterations);
        let (t, r) = pose_error(&result.pose, &f.gt);
        assert!(t < 1e-9 && r < 1e-9);
    }

    #[test]
    fn refine_recovers_from_perturbation() {
        let f = fixture(2, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let init = perturb(&f.gt, 0.25, 4.0, &mut rng);
        let result = refine_pose(
            &init,
            &f.observations,
            &f.pyramid,
            &f.k,
            &SolverConfig::default(),
        )
        .unwrap();
        let (t, r) = pose_error(&result.pose, &f.gt);
        assert!(result.converged);
        assert!(t < 1e-3, "translation error {t}");
        assert!(r < 0.05, "rotation error {r}");
    }

    #[test]
    fn accepted_costs_strictly_decrease_within_each_level() {
        let f = fixture(3, 150);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = perturb(&f.gt, 0.2, 3.0, &mut rng);
        let result = refine_pose(
            &init,
            &f.observations,
            &f.pyramid,
            &f.k,
            &SolverConfig::default(),
        )
        .unwrap();
        for trace in &result.cost_trace {
            for pair in trace.windows(2) {
                assert!(pair[1] < pair[0], "trace not strictly decreasing: {trace:?}");
            }
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences_over_twist() {
        let f = fixture(4, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut states = 0;
        'outer: for trial in 0..200 {
            if states >= 100 {
                break;
            }
            let pose = perturb(&f.gt, 0.1, 2.0, &mut rng);
            let level_idx = trial % f.pyramid.levels.len();
            let evals = residuals_and_jacobians(&pose, &f.observations, &f.pyramid, &f.k, level_idx);
            if evals.is_empty() {
                continue;
            }
            // FD over the 6 twist coordinates of the first surviving point;
            // skip states where the FD stencil crosses a bilinear cell edge
            let obs_set = &f.observations;
            let mut fd = Matrix3x6::zeros();
            for c in 0..6 {
                let mut coords = [0.0; 6];
                coords[c] = h;
                let plus = se3_exp(&Twist::from_slice(&coords)).compose(&pose);
                coords[c] = -h;
                let minus = se3_exp(&Twist::from_slice(&coords)).compose(&pose);
                let rp = residuals_and_jacobians(&plus, obs_set, &f.pyramid, &f.k, level_idx);
                let rm = residuals_and_jacobians(&minus, obs_set, &f.pyramid, &f.k, level_idx);
                if rp.len() != evals.len() || rm.len() != evals.len() {
                    continue 'outer;
                }
                fd.set_column(c, &((rp[0].0 - rm[0].0) / (2.0 * h)));
            }
            let analytic = evals[0].1;
            let rel = (analytic - fd).norm() / analytic.norm().max(1e-12);
            assert!(rel < 1e-4, "relative error {rel} at state {trial}");
            states += 1;
        }
        assert!(states >= 100, "only {states} states checked");
    }

    #[test]
    fn gauge_consistency_under_world_transform() {
        let f = fixture(5, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let init = perturb(&f.gt, 0.15, 2.0, &mut rng);
        let cfg = SolverConfig::default();
        let base = refine_pose(&init, &f.observations, &f.pyramid, &f.k, &cfg).unwrap();

        let g = se3_exp(&Twist::new(
            Vector3::new(5.0, -2.0, 1.0),
            Vector3::new(0.2, -0.1, 0.4),
        ));
        let moved: Vec<ReferenceObservation> = f
            .observations
            .iter()
            .map(|o| ReferenceObservation {
                point_w: g.transform_point(&o.point_w),
                ref_features: o.ref_features.clone(),
            })
            .collect();
        let moved_init = g.compose(&init);
        let moved_result = refine_pose(&moved_init, &moved, &f.pyramid, &f.k, &cfg).unwrap();
        let expected = g.compose(&base.pose);
        let (t, r) = pose_error(&moved_result.pose, &expected);
        assert!(t < 1e-6, "gauge translation drift {t}");
        assert!(r < 1e-6 * 180.0 / std::f64::consts::PI, "gauge rotation drift {r}");
    }

    #[test]
    fn huber_outperforms_quadratic_loss_under_outliers() {
        // observation counts comparable to a real co-visible point set;
        // five corruption draws, median robust error must stay within 5 mm
        // and the quadratic loss must land strictly farther every time
        let f = fixture(6, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut robust_errors = Vec::new();
        for _ in 0..5 {
            // corrupt 30% of the reference features with large arbitrary
            // offsets (random sign per observation, shared across levels)
            let mut corrupted = f.observations.clone();
            let n_bad = corrupted.len() * 3 / 10;
            for obs in corrupted.iter_mut().take(n_bad) {
                let offset = Vector3::new(
                    rng.gen_range(1.0..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    rng.gen_range(1.0..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    rng.gen_range(1.0..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                );
                for feat in &mut obs.ref_features {
                    *feat += offset;
                }
            }
            let init = perturb(&f.gt, 0.2, 3.0, &mut rng);
            let robust_cfg = SolverConfig::default();
            let quadratic_cfg = SolverConfig {
                huber_delta: 1e9, // effectively a pure quadratic loss
                ..robust_cfg
            };
            let robust = refine_pose(&init, &corrupted, &f.pyramid, &f.k, &robust_cfg).unwrap();
            let quadratic =
                refine_pose(&init, &corrupted, &f.pyramid, &f.k, &quadratic_cfg).unwrap();
            let (t_rob, _) = pose_error(&robust.pose, &f.gt);
            let (t_quad, _) = pose_error(&quadratic.pose, &f.gt);
            assert!(t_quad > t_rob, "quadratic {t_quad} not worse than robust {t_rob}");
            robust_errors.push(t_rob);
        }
        robust_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = robust_errors[robust_errors.len() / 2];
        assert!(median < 0.005, "median robust error {median}: {robust_errors:?}");
    }

    #[test]
    fn refinement_is_deterministic() {
        let f = fixture(7, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let init = perturb(&f.gt, 0.2, 3.0, &mut rng);
        let cfg = SolverConfig::default();
        let a = refine_pose(&init, &f.observations, &f.pyramid, &f.k, &cfg).unwrap();
        let b = refine_pose(&init, &f.observations, &f.pyramid, &f.k, &cfg).unwrap();
        assert_eq!(a.pose.translation, b.pose.translation);
        assert_eq!(
            a.pose.rotation.quaternion().coords,
            b.pose.rotation.quaternion().coords
        );
        assert_eq!(a.final_cost.to_bits(), b.final_cost.to_bits());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.cost_trace, b.cost_trace);
    }

    #[test]
    fn too_few_observations_is_an_error() {
        let f = fixture(8, 20);
        let few = &f.observations[..5];
        let err = refine_pose(
            &f.gt,
            few,
            &f.pyramid,
            &f.k,
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SolveError::InsufficientObservations { got: 5, need: 10 }));
    }

    #[test]
    fn make_reference_observations_counts_match_projection_oracle() {
        use crate::mapcloud::IndexedMap;
        let f = fixture(9, 60);
        // build a map holding the fixture points plus junk behind the camera
        let mut points: Vec<Vector3<f64>> = f.observations.iter().map(|o| o.point_w).collect();
        let far_behind = f.gt.transform_point(&Vector3::new(0.0, 0.0, -5.0));
        points.push(far_behind);
        let covis = vec![(0..points.len() as u32).collect::<Vec<_>>()];
        let map = IndexedMap {
            points: points.clone(),
            covis,
            voxel_size: 0.05,
        };
        let obs =
            make_reference_observations(&map, 0, &f.gt, &f.k, &f.pyramid, 10).unwrap();
        // oracle: brute-force re-projection of the covisible points
        let cam_from_world = f.gt.inverse();
        let expected = points
            .iter()
            .filter(|p| {
                sample_all_levels(&f.pyramid, &f.k, &cam_from_world.transform_point(p)).is_some()
            })
            .count();
        assert_eq!(obs.len(), expected);
        assert!(obs.len() >= 60); // the behind-point was dropped
        // single on-axis point: features equal a direct sample
        let p_cam = cam_from_world.transform_point(&obs[0].point_w);
        let direct = sample_all_levels(&f.pyramid, &f.k, &p_cam).unwrap();
        for (a, b) in obs[0].ref_features.iter().zip(&direct) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        assert!(matches!(
            make_reference_observations(&map, 5, &f.gt, &f.k, &f.pyramid, 10),
            Err(SolveError::Map(MapError::UnknownImageId { .. }))
        ));
    }
}
