//! Scan-to-map pose tracking.
//!
//! Aligns a radar point cloud against the Gaussian map by Gauss-Newton on
//! the weighted energy
//!
//!   E(T) = sum_p w_p (T x_p - mu_g)^T V_p (T x_p - mu_g)
//!          + lambda_R |a_g x (R a_p)|^2
//!
//! where V_p is the point's shape-adaptive feature matrix expressed in the
//! world frame (V_p = R V0_p R^T, V0_p computed once per frame in the sensor
//! frame), mu_g the associated Gaussian mean, and a_p, a_g the dominant
//! feature axes of the point and the Gaussian. The cross-product term equals
//! lambda_R (1 - <R a_p, a_g>^2) for unit axes: zero when the axes align,
//! independent of their sign. It only applies to pairs where both features
//! are planar or linear; a blended feature has no meaningful dominant axis
//! (an isotropic spectrum makes it an arbitrary eigenvector choice), and
//! penalizing against it would bias the optimum away from the true pose.
//!
//! Each accepted step re-associates every point with its nearest Gaussian,
//! and a step is only accepted when the fully re-associated energy drops, so
//! the reported energy is non-increasing from the initial guess.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::features::{feature_matrix_from_gaussian, feature_matrix_from_point, FeatureKind};
use crate::geometry::{
    cross3, dot3, mat3_add, mat3_inv, mat3_mul, mat3_scale, mat3_transpose, mat3_vec, norm3,
    outer3, rotation_angle, scale3, solve_sym6, sub3, sym_eig, Mat3, Pose, Vec3,
};
use crate::map::GaussianMap;

#[derive(Debug, Clone)]
pub struct TrackParams {
    /// Planarity / linearity threshold for feature classification.
    pub tau: f64,
    /// Blended-case weights for the normal and direction terms.
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the axis-consistency term.
    pub lambda_r: f64,
    pub max_iters: usize,
    /// Step-norm convergence threshold.
    pub tol: f64,
    /// Radius for neighborhood features and the density weight.
    pub neighbor_radius: f64,
    /// Minimum surviving associations before tracking is degenerate.
    pub min_matches: usize,
    /// Standard deviation added in quadrature to each Gaussian's covariance
    /// for association gating, so freshly fused (very tight) Gaussians still
    /// accept points displaced by the initial pose error.
    pub gate_sigma_floor: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            tau: 0.33,
            beta1: 0.3,
            beta2: 0.3,
            lambda_r: 0.1,
            max_iters: 30,
            tol: 1e-6,
            neighbor_radius: 0.5,
            min_matches: 10,
            gate_sigma_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: Pose,
    /// Gauss-Newton iterations performed (accepted or terminating).
    pub iterations: usize,
    pub final_energy: f64,
    /// Re-associated energy of every accepted state, starting at the initial
    /// pose. Non-increasing by construction (steps are only accepted when the
    /// energy drops).
    pub energy_log: Vec<f64>,
    /// World-frame observation covariance per cloud point at the final pose:
    /// sigma_p = msr * (w V + 1e-4 I)^{-1}, msr the mean energy per match
    /// floored at 1e-6.
    pub per_point_cov: Vec<Mat3>,
    /// True when the step norm fell below `tol` (not an iteration or
    /// line-search cap).
    pub converged: bool,
}

/// Per-point sensor-frame quantities, fixed for the whole solve.
struct PointFeature {
    v0: Mat3,
    /// Symmetric square root of v0.
    s0: Mat3,
    w: f64,
    axis: Vec3,
    /// Planar or linear: the axis participates in the consistency term.
    directional: bool,
}

/// Per-Gaussian association data, cached on first use.
struct GaussFeature {
    mean: Vec3,
    /// Inverse of the gate covariance (cov + floor^2 I).
    gate_inv: Mat3,
    axis: Vec3,
    directional: bool,
}

fn sym_sqrt(m: &Mat3) -> Mat3 {
    let (lam, vecs) = sym_eig(m);
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        let r = lam[i].max(0.0).sqrt();
        s = mat3_add(&s, &mat3_scale(&outer3(vecs[i], vecs[i]), r));
    }
    s
}

/// Neighborhood features and density weights for every cloud point.
/// Weights are 1/(1 + rho) with rho the neighbor count per sphere volume,
/// normalized to mean one over the frame.
fn point_features(cloud: &[Vec3], params: &TrackParams) -> Result<Vec<PointFeature>> {
    let r = params.neighbor_radius;
    let r2 = r * r;
    let cell = |p: &Vec3| -> (i64, i64, i64) {
        (
            (p[0] / r).floor() as i64,
            (p[1] / r).floor() as i64,
            (p[2] / r).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let volume = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
    let mut feats = Vec::with_capacity(cloud.len());
    let mut weight_sum = 0.0;
    let mut neighborhood = Vec::new();
    for p in cloud.iter() {
        neighborhood.clear();
        let c = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        for &j in ids {
                            let d = sub3(cloud[j], *p);
                            if dot3(d, d) <= r2 {
                                neighborhood.push(cloud[j]);
                            }
                        }
                    }
                }
            }
        }
        let feature =
            feature_matrix_from_point(&neighborhood, params.tau, params.beta1, params.beta2)?;
        // The point itself always matches the radius test.
        let rho = (neighborhood.len() - 1) as f64 / volume;
        let w = 1.0 / (1.0 + rho);
        weight_sum += w;
        feats.push(PointFeature {
            s0: sym_sqrt(&feature.m),
            v0: feature.m,
            w,
            axis: feature.dominant,
            directional: feature.kind != FeatureKind::Blended && !feature.fallback,
        });
    }
    if !feats.is_empty() && weight_sum > 0.0 {
        let scale = feats.len() as f64 / weight_sum;
        for f in &mut feats {
            f.w *= scale;
        }
    }
    Ok(feats)
}

fn gauss_feature(map: &GaussianMap, id: u32, params: &TrackParams) -> Result<GaussFeature> {
    let prim = map.get(id);
    let floor = params.gate_sigma_floor * params.gate_sigma_floor;
    let mut gate = prim.cov;
    for a in 0..3 {
        gate[a][a] += floor;
    }
    let gate_inv = mat3_inv(&gate)?;
    let feat = feature_matrix_from_gaussian(&prim.cov, params.tau, params.beta1, params.beta2)?;
    Ok(GaussFeature {
        mean: prim.mean,
        gate_inv,
        axis: feat.dominant,
        directional: feat.kind != FeatureKind::Blended,
    })
}

/// Nearest-Gaussian association with a 3-sigma Mahalanobis gate.
fn associate(
    cloud: &[Vec3],
    map: &GaussianMap,
    pose: &Pose,
    params: &TrackParams,
    cache: &mut HashMap<u32, GaussFeature>,
) -> Result<Vec<(usize, u32)>> {
    let mut matches = Vec::new();
    for (i, p) in cloud.iter().enumerate() {
        let world = pose.transform_point(*p);
        let (id, _) = match map.nearest_gaussian(world) {
            Ok(hit) => hit,
            Err(Error::EmptyMap) => return Ok(matches),
            Err(e) => return Err(e),
        };
        if !cache.contains_key(&id) {
            cache.insert(id, gauss_feature(map, id, params)?);
        }
        let g = &cache[&id];
        let d = sub3(world, g.mean);
        let mahal2 = dot3(d, mat3_vec(&g.gate_inv, d));
        if mahal2 <= 9.0 {
            matches.push((i, id));
        }
    }
    Ok(matches)
}

/// Energy of a fixed association set at a given pose.
fn energy(
    cloud: &[Vec3],
    feats: &[PointFeature],
    cache: &HashMap<u32, GaussFeature>,
    matches: &[(usize, u32)],
    pose: &Pose,
    lambda_r: f64,
) -> f64 {
    let rt = mat3_transpose(&pose.rotation);
    let mut e = 0.0;
    for &(i, id) in matches {
        let f = &feats[i];
        let g = &cache[&id];
        // Sensor-frame residual u = R^T (T x - mu); u^T V0 u = y^T V y.
        let u = mat3_vec(&rt, sub3(pose.transform_point(cloud[i]), g.mean));
        e += f.w * dot3(u, mat3_vec(&f.v0, u));
        if f.directional && g.directional {
            let axis_r = cross3(g.axis, mat3_vec(&pose.rotation, f.axis));
            e += lambda_r * dot3(axis_r, axis_r);
        }
    }
    e
}

/// Stacked 3-row residual blocks with Jacobians w.r.t. the left-retraction
/// state (omega, delta_t): T' = (exp(omega) R, exp(omega) t + delta_t).
/// Returns (residual, jacobian columns) per block.
#[allow(clippy::type_complexity)]
fn residual_blocks(
    cloud: &[Vec3],
    feats: &[PointFeature],
    cache: &HashMap<u32, GaussFeature>,
    matches: &[(usize, u32)],
    pose: &Pose,
    lambda_r: f64,
) -> Vec<(Vec3, [[f64; 6]; 3])> {
    let rt = mat3_transpose(&pose.rotation);
    let sqrt_lr = lambda_r.sqrt();
    let mut blocks = Vec::with_capacity(matches.len() * 2);
    for &(i, id) in matches {
        let f = &feats[i];
        let g = &cache[&id];
        let sw = f.w.sqrt();
        let u = mat3_vec(&rt, sub3(pose.transform_point(cloud[i]), g.mean));
        let r_quad = scale3(mat3_vec(&f.s0, u), sw);
        // du/d(omega) = -R^T [mu]_x, du/d(delta_t) = R^T.
        let neg_mu_hat = [
            [0.0, g.mean[2], -g.mean[1]],
            [-g.mean[2], 0.0, g.mean[0]],
            [g.mean[1], -g.mean[0], 0.0],
        ];
        let j_om = mat3_scale(&mat3_mul(&f.s0, &mat3_mul(&rt, &neg_mu_hat)), sw);
        let j_tr = mat3_scale(&mat3_mul(&f.s0, &rt), sw);
        let mut jac = [[0.0; 6]; 3];
        for row in 0..3 {
            for col in 0..3 {
                jac[row][col] = j_om[row][col];
                jac[row][col + 3] = j_tr[row][col];
            }
        }
        blocks.push((r_quad, jac));

        if !(f.directional && g.directional) {
            continue;
        }
        // Axis term r = sqrt(lambda_R) a_g x (R a_p);
        // dr/d(omega) = -sqrt(lambda_R) [a_g]_x [R a_p]_x.
        let ra = mat3_vec(&pose.rotation, f.axis);
        let r_axis = scale3(cross3(g.axis, ra), sqrt_lr);
        let ag_hat = [
            [0.0, -g.axis[2], g.axis[1]],
            [g.axis[2], 0.0, -g.axis[0]],
            [-g.axis[1], g.axis[0], 0.0],
        ];
        let ra_hat = [
            [0.0, -ra[2], ra[1]],
            [ra[2], 0.0, -ra[0]],
            [-ra[1], ra[0], 0.0],
        ];
        let j_ax = mat3_scale(&mat3_mul(&ag_hat, &ra_hat), -sqrt_lr);
        let mut jac_ax = [[0.0; 6]; 3];
        for row in 0..3 {
            for col in 0..3 {
                jac_ax[row][col] = j_ax[row][col];
            }
        }
        blocks.push((r_axis, jac_ax));
    }
    blocks
}

/// Gauss-Newton scan-to-map alignment starting from `initial`.
///
/// Re-associates against the nearest Gaussian on every candidate pose, gates
/// matches at 3 sigma, and step-halves until the re-associated energy drops.
/// Errors with `TrackingDegenerate` when fewer than `min_matches`
/// associations survive the gate at the initial pose.
pub fn track(
    cloud: &[Vec3],
    map: &GaussianMap,
    initial: &Pose,
    params: &TrackParams,
) -> Result<TrackResult> {
    let feats = point_features(cloud, params)?;
    let mut cache: HashMap<u32, GaussFeature> = HashMap::new();
    let mut pose = *initial;
    let mut matches = associate(cloud, map, &pose, params, &mut cache)?;
    if matches.len() < params.min_matches {
        return Err(Error::TrackingDegenerate {
            matches: matches.len(),
            needed: params.min_matches,
        });
    }
    let mut current = energy(cloud, &feats, &cache, &matches, &pose, params.lambda_r);
    let mut energy_log = vec![current];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        iterations += 1;
        let blocks = residual_blocks(cloud, &feats, &cache, &matches, &pose, params.lambda_r);
        let mut h = [[0.0f64; 6]; 6];
        let mut g = [0.0f64; 6];
        for (r, j) in &blocks {
            for a in 0..6 {
                for b in 0..6 {
                    let mut s = 0.0;
                    for row in 0..3 {
                        s += j[row][a] * j[row][b];
                    }
                    h[a][b] += s;
                }
                let mut s = 0.0;
                for row in 0..3 {
                    s += j[row][a] * r[row];
                }
                g[a] -= s;
            }
        }
        // Tiny Levenberg damping keeps the solve definite when a direction
        // is unconstrained (for example a single plane).
        let trace: f64 = (0..6).map(|a| h[a][a]).sum();
        let damp = 1e-12 * (1.0 + trace / 6.0);
        for a in 0..6 {
            h[a][a] += damp;
        }
        let Some(step) = solve_sym6(&h, &g) else {
            break;
        };
        let step_norm = (step.iter().map(|s| s * s).sum::<f64>()).sqrt();
        if step_norm < params.tol {
            converged = true;
            break;
        }
        // Step-halving on the re-associated energy.
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..12 {
            let omega = [step[0] * scale, step[1] * scale, step[2] * scale];
            let delta_t = [step[3] * scale, step[4] * scale, step[5] * scale];
            let candidate = pose.retract(omega, delta_t);
            let cand_matches = associate(cloud, map, &candidate, params, &mut cache)?;
            if cand_matches.len() >= params.min_matches {
                let cand_energy = energy(
                    cloud,
                    &feats,
                    &cache,
                    &cand_matches,
                    &candidate,
                    params.lambda_r,
                );
                if cand_energy < current {
                    pose = candidate;
                    matches = cand_matches;
                    current = cand_energy;
                    energy_log.push(current);
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            // No descent at any scale: treat the pose as locally optimal.
            break;
        }
    }

    let msr = (current / matches.len() as f64).max(1e-6);
    let r = &pose.rotation;
    let rt = mat3_transpose(r);
    let per_point_cov = feats
        .iter()
        .map(|f| {
            let v_world = mat3_mul(r, &mat3_mul(&f.v0, &rt));
            let mut m = mat3_scale(&v_world, f.w);
            for a in 0..3 {
                m[a][a] += 1e-4;
            }
            // w V + 1e-4 I is positive definite by construction.
            let inv = mat3_inv(&m).expect("regularized weight matrix invertible");
            let mut cov = mat3_scale(&inv, msr);
            // Symmetrize against accumulated roundoff.
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let avg = 0.5 * (cov[a][b] + cov[b][a]);
                    cov[a][b] = avg;
                    cov[b][a] = avg;
                }
            }
            cov
        })
        .collect();

    Ok(TrackResult {
        pose,
        iterations,
        final_energy: current,
        energy_log,
        per_point_cov,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct KeyframeThresholds {
    /// Minimum fraction of frame points covered by the map.
    pub v_share: f64,
    /// Translation from the last keyframe that forces a new one, meters.
    pub max_translation: f64,
    /// Rotation from the last keyframe that forces a new one, degrees.
    pub max_rotation_deg: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        KeyframeThresholds {
            v_share: 0.6,
            max_translation: 2.0,
            max_rotation_deg: 15.0,
        }
    }
}

/// Decides whether the current frame should become a keyframe: low map
/// coverage (fraction of points whose nearest Gaussian lies within 3 sigma),
/// or large motion since the last keyframe.
pub fn keyframe_check(
    cloud: &[Vec3],
    pose: &Pose,
    last_keyframe: &Pose,
    map: &GaussianMap,
    thresholds: &KeyframeThresholds,
) -> bool {
    let trans = norm3(sub3(pose.translation, last_keyframe.translation));
    if trans > thresholds.max_translation {
        return true;
    }
    let rel = mat3_mul(&mat3_transpose(&last_keyframe.rotation), &pose.rotation);
    if rotation_angle(&rel).to_degrees() > thresholds.max_rotation_deg {
        return true;
    }
    if cloud.is_empty() {
        return false;
    }
    if map.is_empty() {
        return true;
    }
    let params = TrackParams::default();
    let mut cache: HashMap<u32, GaussFeature> = HashMap::new();
    let mut covered = 0usize;
    for p in cloud {
        let world = pose.transform_point(*p);
        let Ok((id, _)) = map.nearest_gaussian(world) else {
            continue;
        };
        if !cache.contains_key(&id) {
            match gauss_feature(map, id, &params) {
                Ok(g) => {
                    cache.insert(id, g);
                }
                Err(_) => continue,
            }
        }
        let g = &cache[&id];
        let d = sub3(world, g.mean);
        if dot3(d, mat3_vec(&g.gate_inv, d)) <= 9.0 {
            covered += 1;
        }
    }
    (covered as f64 / cloud.len() as f64) < thresholds.v_share
}
