//! Sequence processing: run configuration, the per-frame odometry and
//! mapping loop over a dataset, and the synthetic sequence builder.
//!
//! Each radar frame passes through ego-velocity estimation, dynamic
//! classification, octree label propagation onto the enhanced cloud, mask
//! projection, static-cloud tracking against the map, keyframe fusion, and
//! periodic refinement. Camera frames that fall between radar frames get
//! Hermite-interpolated poses and join refinement as extra photometric
//! supervision; their masks are reprojected from the preceding radar frame.
//!
//! The loop is deterministic: the only randomness is the densify split
//! jitter, drawn from a generator seeded by `RunConfig::seed`, so two runs
//! over the same dataset and config produce bit-identical outputs.

use std::collections::VecDeque;

use crate::dataset::{Dataset, TumRow};
use crate::doppler::{classify_detections, solve_ego_velocity};
use crate::error::{Error, Result};
use crate::geometry::{
    add3, exp_so3, log_so3, mat3_mul, mat3_transpose, mat3_vec, norm3, scale3, Mat3, Pose, Vec3,
    IDENTITY3,
};
use crate::image::{CameraIntrinsics, ColorImage};
use crate::map::{init_schedule, GaussianMap};
use crate::mask::{project_mask, PixelMask};
use crate::metrics::{RenderMetrics, TrajectoryRecord, ASSOCIATION_TOLERANCE};
use crate::octree::{
    bounding_cube, build_octree, cluster_and_mark, label_from_dynamic_indices, propagate_labels,
    rebuild_enhanced_octree, DynamicCluster, LabeledOctree,
};
use crate::refine::{
    depth_image_from_points, hermite_pose, loss_csv_header, loss_csv_row, refine_step,
    InterpolationSegment, RefineFrame, RefineRates, RefineWeights,
};
use crate::render::render;
use crate::sim::{
    build_world, camera_frame, generate_packet, trajectory_state, world_to_camera, TrajectoryKind,
    WorldSpec, CAMERA_TO_BODY,
};
use crate::tracking::{keyframe_check, track, KeyframeThresholds, TrackParams};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Radar frame rate of synthetic sequences; one camera-only frame is placed
/// halfway between each pair of radar frames.
pub const RADAR_HZ: f64 = 10.0;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Every tunable of the run loop. Deserializes from TOML where every field
/// is optional and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for the densify split jitter.
    pub seed: u64,
    /// Doppler residual threshold separating dynamic from static, m/s.
    pub delta_v: f64,
    /// Octree depth for label propagation and clustering.
    pub lambda_depth: u32,
    /// Neighbor count for label propagation; must be odd.
    pub k_neighbors: usize,
    /// Planarity / linearity threshold for tracking features.
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the tracking axis-consistency term.
    pub lambda_r: f64,
    /// Coarsest voxel size of the map level schedule, meters.
    pub delta_0: f64,
    /// Densify threshold at the coarsest level.
    pub epsilon_0: f64,
    pub num_levels: usize,
    /// Radar range noise floor used in fusion, meters.
    pub sigma_eps: f64,
    /// Geometric-loss share of the composite refinement loss.
    pub lambda1: f64,
    /// Roughness-loss weight.
    pub lambda2: f64,
    /// Out-of-band roughness penalty weight.
    pub gamma: f64,
    pub lr_mean: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Camera size for synthetic sequences; runs always use the dataset's
    /// own intrinsics.
    pub image_width: u32,
    pub image_height: u32,
    /// Motion since the last keyframe that forces a new one.
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
    /// Minimum map-coverage fraction below which a frame becomes a keyframe.
    pub v_share: f64,
    /// Static points tracked (and fused) per frame; larger clouds are
    /// subsampled by a fixed stride.
    pub track_max_points: usize,
    pub max_track_iters: usize,
    pub min_matches: usize,
    /// Neighborhood radius for tracking features, meters.
    pub neighbor_radius: f64,
    /// Keyframes between refinement bursts.
    pub refine_every: usize,
    /// Refinement steps per burst; 0 disables refinement.
    pub refine_steps: usize,
    /// Most recent supervision frames refined per burst.
    pub refine_window: usize,
    /// Fused point standard deviation when tracking provides no covariance
    /// (first keyframe), meters.
    pub point_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            delta_v: 0.25,
            lambda_depth: 6,
            k_neighbors: 5,
            tau: 0.33,
            beta1: 0.3,
            beta2: 0.3,
            lambda_r: 0.1,
            delta_0: 1.6,
            epsilon_0: 2e-4,
            num_levels: 6,
            sigma_eps: 0.1,
            lambda1: 0.2,
            lambda2: 0.01,
            gamma: 1.0,
            lr_mean: 1e-4,
            lr_scale: 5e-3,
            lr_rotation: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            image_width: 160,
            image_height: 120,
            keyframe_translation: 2.0,
            keyframe_rotation_deg: 15.0,
            v_share: 0.6,
            track_max_points: 2000,
            max_track_iters: 30,
            min_matches: 10,
            neighbor_radius: 0.5,
            refine_every: 4,
            refine_steps: 25,
            refine_window: 6,
            point_sigma: 0.05,
        }
    }
}

impl RunConfig {
    /// Range checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, f64); 9] = [
            ("delta_v", self.delta_v),
            ("delta_0", self.delta_0),
            ("epsilon_0", self.epsilon_0),
            ("sigma_eps", self.sigma_eps),
            ("keyframe_translation", self.keyframe_translation),
            ("keyframe_rotation_deg", self.keyframe_rotation_deg),
            ("neighbor_radius", self.neighbor_radius),
            ("point_sigma", self.point_sigma),
            ("tau", self.tau),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let non_negative: [(&str, f64); 9] = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda_r", self.lambda_r),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
            ("lr_mean", self.lr_mean),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        if !(self.lr_color >= 0.0) {
            return Err(Error::config("lr_color", "must be non-negative"));
        }
        if !(self.tau < 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1)"));
        }
        if !(1..=12).contains(&self.lambda_depth) {
            return Err(Error::config("lambda_depth", "must lie in [1, 12]"));
        }
        if self.k_neighbors == 0 || self.k_neighbors % 2 == 0 {
            return Err(Error::config("k_neighbors", "must be odd and positive"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1 <= 1.0) {
            return Err(Error::config("lambda1", "must lie in [0, 1]"));
        }
        if !(self.v_share >= 0.0 && self.v_share <= 1.0) {
            return Err(Error::config("v_share", "must lie in [0, 1]"));
        }
        if self.num_levels < 1 {
            return Err(Error::config("num_levels", "need at least one level"));
        }
        let sized: [(&str, u32); 2] = [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
        ];
        for (key, v) in sized {
            if !(1..=4096).contains(&v) {
                return Err(Error::config(key, "must lie in [1, 4096]"));
            }
        }
        if self.track_max_points == 0 {
            return Err(Error::config("track_max_points", "must be positive"));
        }
        if self.max_track_iters == 0 {
            return Err(Error::config("max_track_iters", "must be positive"));
        }
        if self.min_matches == 0 {
            return Err(Error::config("min_matches", "must be positive"));
        }
        if self.refine_every == 0 {
            return Err(Error::config("refine_every", "must be positive"));
        }
        if self.refine_window == 0 {
            return Err(Error::config("refine_window", "must be positive"));
        }
        Ok(())
    }

    pub fn track_params(&self) -> TrackParams {
        TrackParams {
            tau: self.tau,
            beta1: self.beta1,
            beta2: self.beta2,
            lambda_r: self.lambda_r,
            max_iters: self.max_track_iters,
            tol: 1e-6,
            neighbor_radius: self.neighbor_radius,
            min_matches: self.min_matches,
            gate_sigma_floor: 0.1,
        }
    }

    pub fn keyframe_thresholds(&self) -> KeyframeThresholds {
        KeyframeThresholds {
            v_share: self.v_share,
            max_translation: self.keyframe_translation,
            max_rotation_deg: self.keyframe_rotation_deg,
        }
    }

    pub fn refine_weights(&self) -> RefineWeights {
        RefineWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
            tau: self.tau,
        }
    }

    pub fn refine_rates(&self) -> RefineRates {
        RefineRates {
            mean: self.lr_mean,
            scale: self.lr_scale,
            rotation: self.lr_rotation,
            opacity: self.lr_opacity,
            color: self.lr_color,
            max_halvings: 5,
        }
    }
}

/// TOML text to a validated config. Serde errors (unknown or mistyped keys)
/// and range errors both name the key.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Intrinsics scaled from the 160x120, f = 100 reference so synthetic
/// sequences keep their field of view at any resolution.
pub fn scaled_camera(width: u32, height: u32) -> CameraIntrinsics {
    let f = 100.0 * width as f64 / 160.0;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

// ---------------------------------------------------------------------------
// Synthetic sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub trajectory: TrajectoryKind,
    /// Path length, meters; sets the loop or arc radius.
    pub length: f64,
    /// Platform speed, m/s.
    pub speed: f64,
    /// Radar frame count; camera-only frames are added between them.
    pub radar_frames: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            trajectory: TrajectoryKind::Loop,
            length: 40.0,
            speed: 1.5,
            radar_frames: 100,
        }
    }
}

/// Renders a full sequence: radar frames at `RADAR_HZ` with one camera-only
/// frame halfway between each pair, ground truth rows at every stamp.
pub fn simulate_dataset(spec: WorldSpec, opts: &SimulateOptions) -> Result<Dataset> {
    if opts.radar_frames < 2 {
        return Err(Error::config("radar_frames", "need at least two radar frames"));
    }
    let world = build_world(spec)?;
    let camera = world.spec.camera;
    let dt = 1.0 / RADAR_HZ;
    let mut dataset = Dataset::new(camera);
    for i in 0..opts.radar_frames {
        let t = i as f64 * dt;
        let (pose, velocity) = trajectory_state(opts.trajectory, opts.length, opts.speed, t)?;
        let packet = generate_packet(&world, &pose, velocity, t);
        dataset.gt_rows.push(TumRow::from_pose(t, &packet.gt_pose));
        dataset.push_frame(t, packet.raw, packet.enhanced, packet.image)?;
        if i + 1 < opts.radar_frames {
            let tm = t + 0.5 * dt;
            let (pose_m, _) = trajectory_state(opts.trajectory, opts.length, opts.speed, tm)?;
            let image = camera_frame(&world, &pose_m, &camera, tm);
            dataset.gt_rows.push(TumRow::from_pose(tm, &pose_m));
            dataset.push_image_frame(tm, image)?;
        }
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Per-frame front end
// ---------------------------------------------------------------------------

/// Dynamic-scene summary of one radar frame: the enhanced-cloud octree with
/// marked clusters and the projected pixel mask.
struct FrameScene {
    mask: PixelMask,
    tree: Option<LabeledOctree>,
    clusters: Vec<DynamicCluster>,
    /// Enhanced points labeled static, body frame, with their colors.
    static_points: Vec<Vec3>,
    static_colors: Vec<[f64; 3]>,
}

/// Camera pose for points already in the body frame of the same stamp.
fn camera_from_body() -> Pose {
    Pose::new(mat3_transpose(&CAMERA_TO_BODY), [0.0; 3], 0.0)
}

/// Classification, label propagation, clustering, and mask projection for
/// one radar frame. `v_body` of None marks every detection static.
fn analyze_frame(
    raw: &[crate::doppler::RadarDetection],
    enhanced_points: &[Vec3],
    enhanced_colors: &[[f64; 3]],
    v_body: Option<Vec3>,
    camera: &CameraIntrinsics,
    config: &RunConfig,
) -> Result<FrameScene> {
    let flags = match v_body {
        Some(v) => classify_detections(raw, v, config.delta_v),
        None => vec![false; raw.len()],
    };
    let labels = if raw.is_empty() || enhanced_points.is_empty() {
        vec![false; enhanced_points.len()]
    } else {
        let points: Vec<Vec3> = raw.iter().map(|d| d.cartesian()).collect();
        let tree = build_octree(&points, config.lambda_depth, bounding_cube(&points))?;
        let dynamic_indices: Vec<u32> = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i as u32))
            .collect();
        let tree = label_from_dynamic_indices(tree, &dynamic_indices);
        propagate_labels(&tree, enhanced_points, config.k_neighbors)?
    };
    let (width, height) = (camera.width as usize, camera.height as usize);
    let (mask, tree, clusters) = if enhanced_points.is_empty() {
        (PixelMask::empty(width, height), None, Vec::new())
    } else {
        let mut tree = rebuild_enhanced_octree(enhanced_points, &labels, config.lambda_depth)?;
        let clusters = cluster_and_mark(&mut tree);
        let mask = project_mask(&tree, &clusters, camera, &camera_from_body());
        (mask, Some(tree), clusters)
    };
    let mut static_points = Vec::new();
    let mut static_colors = Vec::new();
    for (i, &p) in enhanced_points.iter().enumerate() {
        if !labels[i] {
            static_points.push(p);
            static_colors.push(enhanced_colors.get(i).copied().unwrap_or([0.5; 3]));
        }
    }
    Ok(FrameScene {
        mask,
        tree,
        clusters,
        static_points,
        static_colors,
    })
}

/// Every `stride`-th element, stride chosen so at most `cap` survive.
fn stride_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let stride = len.div_ceil(cap);
    (0..len).step_by(stride).collect()
}

/// Dynamic mask of a single radar frame plus the input image with masked
/// pixels tinted red, for inspection.
pub fn frame_mask(
    dataset: &Dataset,
    frame_index: usize,
    config: &RunConfig,
) -> Result<(PixelMask, ColorImage)> {
    config.validate()?;
    let frame = dataset
        .frames
        .get(frame_index)
        .ok_or_else(|| Error::data(format!("frame {frame_index} out of range")))?;
    if frame.image_only {
        return Err(Error::data(format!(
            "frame {frame_index} is image-only; masks are defined at radar frames"
        )));
    }
    let v_body = solve_ego_velocity(&frame.raw, config.delta_v, 30)
        .ok()
        .map(|e| e.v_hat);
    let scene = analyze_frame(
        &frame.raw,
        &frame.enhanced.points,
        &frame.enhanced.colors,
        v_body,
        &dataset.camera,
        config,
    )?;
    let mut overlay = frame.image.clone();
    for y in 0..overlay.height {
        for x in 0..overlay.width {
            if scene.mask.is_set(x, y) {
                let c = overlay.get(x, y);
                overlay.set(x, y, [0.5 * c[0] + 0.5, 0.5 * c[1], 0.5 * c[2]]);
            }
        }
    }
    Ok((scene.mask, overlay))
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutputs {
    /// Estimated body poses, one per radar frame.
    pub trajectory: TrajectoryRecord,
    pub map: GaussianMap,
    /// Dynamic masks keyed by dataset frame index, one per radar frame.
    pub masks: Vec<(u32, PixelMask)>,
    /// CSV of the composite loss after every refinement step.
    pub loss_log: String,
    /// Bridging, degeneracy, keyframe, and densify notes, in frame order.
    pub events: Vec<String>,
    pub keyframe_count: usize,
    /// Live primitive count after each radar frame, in frame order.
    pub map_sizes: Vec<usize>,
}

/// Pose and dynamic-scene state of the last processed radar frame, carried
/// so in-between camera frames can be interpolated and masked.
struct PrevRadar {
    pose: Pose,
    velocity: Vec3,
    t: f64,
    tree: Option<LabeledOctree>,
    clusters: Vec<DynamicCluster>,
}

/// Runs the full loop over a dataset. The first radar frame anchors the
/// estimate at the identity; evaluation aligns trajectories, so the anchor
/// choice is immaterial.
pub fn run_slam(dataset: &Dataset, config: &RunConfig) -> Result<RunOutputs> {
    config.validate()?;
    let camera = dataset.camera;
    camera.validate()?;
    if !dataset.frames.iter().any(|f| !f.image_only) {
        return Err(Error::data("dataset has no radar frames"));
    }

    let schedule = init_schedule(config.delta_0, config.epsilon_0, config.num_levels)?;
    let mut map = GaussianMap::new(schedule, config.sigma_eps);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0xD15F_0C05);
    let track_params = config.track_params();
    let thresholds = config.keyframe_thresholds();
    let weights = config.refine_weights();
    let rates = config.refine_rates();
    let default_cov: Mat3 = {
        let s2 = config.point_sigma * config.point_sigma;
        [[s2, 0.0, 0.0], [0.0, s2, 0.0], [0.0, 0.0, s2]]
    };

    let mut trajectory = TrajectoryRecord::new();
    let mut masks: Vec<(u32, PixelMask)> = Vec::new();
    let mut map_sizes: Vec<usize> = Vec::new();
    let mut events: Vec<String> = Vec::new();
    let mut loss_log = format!("{}\n", loss_csv_header());
    let mut global_step: u64 = 0;

    let mut prev: Option<PrevRadar> = None;
    let mut velocity_world: Vec3 = [0.0; 3];
    let mut angular_velocity_body: Vec3 = [0.0; 3];
    let mut last_keyframe_pose = Pose::identity();
    let mut keyframe_count = 0usize;
    let mut pending_images: Vec<(f64, ColorImage)> = Vec::new();
    let mut store: VecDeque<RefineFrame> = VecDeque::new();

    for (idx, frame) in dataset.frames.iter().enumerate() {
        if frame.image_only {
            if prev.is_some() {
                pending_images.push((frame.timestamp, frame.image.clone()));
            }
            continue;
        }
        let t = frame.timestamp;

        // Ego velocity in the body frame; reuse the previous world velocity
        // through the predicted rotation when the solve is impossible.
        let prev_rotation = prev.as_ref().map_or(IDENTITY3, |p| p.pose.rotation);
        let (v_body, ego_ok) = match solve_ego_velocity(&frame.raw, config.delta_v, 30) {
            Ok(est) => {
                if !est.condition_ok {
                    events.push(format!(
                        "frame {idx}: ego velocity rank-deficient, solved in the spanned subspace"
                    ));
                }
                (est.v_hat, true)
            }
            Err(e) => {
                events.push(format!("frame {idx}: ego velocity unsolved ({e})"));
                (mat3_vec(&mat3_transpose(&prev_rotation), velocity_world), false)
            }
        };

        let scene = analyze_frame(
            &frame.raw,
            &frame.enhanced.points,
            &frame.enhanced.colors,
            ego_ok.then_some(v_body),
            &camera,
            config,
        )?;

        let kept = stride_indices(scene.static_points.len(), config.track_max_points);
        let cloud: Vec<Vec3> = kept.iter().map(|&i| scene.static_points[i]).collect();
        let colors: Vec<[f64; 3]> = kept.iter().map(|&i| scene.static_colors[i]).collect();

        // Pose: constant-velocity prediction (linear and angular) refined by
        // tracking. The frame is bridged (prediction kept, no fusion) when
        // tracking cannot associate enough points.
        let mut per_point_cov: Option<Vec<Mat3>> = None;
        let mut bridged = false;
        let pose = match &prev {
            None => Pose::new(IDENTITY3, [0.0; 3], t),
            Some(p) => {
                let dt = t - p.t;
                let predicted = Pose::new(
                    mat3_mul(&p.pose.rotation, &exp_so3(scale3(angular_velocity_body, dt))),
                    add3(p.pose.translation, scale3(velocity_world, dt)),
                    t,
                );
                if map.is_empty() || cloud.is_empty() {
                    bridged = true;
                    events.push(format!(
                        "frame {idx}: nothing to track against, constant-velocity bridge"
                    ));
                    predicted
                } else {
                    match track(&cloud, &map, &predicted, &track_params) {
                        Ok(result) => {
                            per_point_cov = Some(result.per_point_cov);
                            let mut pose = result.pose;
                            pose.stamp = t;
                            pose
                        }
                        Err(Error::TrackingDegenerate { matches, needed }) => {
                            bridged = true;
                            events.push(format!(
                                "frame {idx}: tracking degenerate ({matches}/{needed} matches), \
                                 constant-velocity bridge"
                            ));
                            predicted
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        };
        if ego_ok {
            velocity_world = mat3_vec(&pose.rotation, v_body);
        }
        // Angular rate from the last tracked pair; kept through bridges and
        // near the rotation-logarithm cut.
        if !bridged {
            if let Some(p) = &prev {
                let dt = t - p.t;
                let rel = mat3_mul(&mat3_transpose(&p.pose.rotation), &pose.rotation);
                if let Ok(w) = log_so3(&rel) {
                    if dt > 1e-9 {
                        angular_velocity_body = scale3(w, 1.0 / dt);
                    }
                }
            }
        }

        // Keyframe: fuse the tracked static subsample into the map. Bridged
        // poses are never trusted with map updates.
        let is_keyframe = !bridged
            && !cloud.is_empty()
            && (map.is_empty()
                || keyframe_check(&cloud, &pose, &last_keyframe_pose, &map, &thresholds));
        let mut keyframe_refine: Option<RefineFrame> = None;
        if is_keyframe {
            let mut world_points = Vec::with_capacity(cloud.len());
            for (j, &p) in cloud.iter().enumerate() {
                let pw = pose.transform_point(p);
                let cov_p = per_point_cov
                    .as_ref()
                    .and_then(|c| c.get(j))
                    .copied()
                    .unwrap_or(default_cov);
                let d = norm3(pw);
                let e_r = if d > 1e-12 { scale3(pw, 1.0 / d) } else { [1.0, 0.0, 0.0] };
                map.insert_or_merge(pw, d, e_r, &cov_p, colors[j]);
                world_points.push(pw);
            }
            last_keyframe_pose = pose;
            keyframe_count += 1;
            let w2c = world_to_camera(&pose);
            let radar_depth = depth_image_from_points(&world_points, &w2c, &camera);
            keyframe_refine = Some(RefineFrame {
                observed: frame.image.clone(),
                world_to_camera: w2c,
                camera,
                mask: Some(scene.mask.clone()),
                radar_depth: Some(radar_depth),
            });
            events.push(format!(
                "frame {idx}: keyframe {keyframe_count}, map size {}",
                map.len()
            ));
        }

        // Camera-only frames since the previous radar frame: Hermite pose
        // between the two radar poses, mask reprojected from the previous
        // frame's clusters.
        if let Some(p) = &prev {
            if !pending_images.is_empty() {
                let segment =
                    InterpolationSegment::new(p.pose, pose, p.velocity, velocity_world, p.t, t)?;
                for (ti, image) in pending_images.drain(..) {
                    if !(ti > p.t && ti < t) {
                        continue;
                    }
                    let pose_i = hermite_pose(&segment, ti)?;
                    let w2c = world_to_camera(&pose_i);
                    let mask = match (&p.tree, p.clusters.is_empty()) {
                        (Some(tree), false) => {
                            let camera_from_tree = w2c.compose(&p.pose);
                            Some(project_mask(tree, &p.clusters, &camera, &camera_from_tree))
                        }
                        _ => None,
                    };
                    store.push_back(RefineFrame {
                        observed: image,
                        world_to_camera: w2c,
                        camera,
                        mask,
                        radar_depth: None,
                    });
                }
            }
        }
        if let Some(rf) = keyframe_refine {
            store.push_back(rf);
        }
        while store.len() > 2 * config.refine_window {
            store.pop_front();
        }

        // Periodic refinement over the most recent supervision frames,
        // followed by one densify and prune pass.
        if is_keyframe
            && config.refine_steps > 0
            && keyframe_count % config.refine_every == 0
            && !map.is_empty()
            && !store.is_empty()
        {
            let window = store.make_contiguous();
            let start = window.len().saturating_sub(config.refine_window);
            let frames = &window[start..];
            for _ in 0..config.refine_steps {
                let outcome = refine_step(&mut map, frames, &weights, &rates)?;
                global_step += 1;
                loss_log.push_str(&loss_csv_row(global_step, &outcome.after));
                loss_log.push('\n');
            }
            let split = map.densify_on_gradient(&mut rng);
            let pruned = map.prune();
            if split > 0 || pruned > 0 {
                events.push(format!("frame {idx}: densified {split}, pruned {pruned}"));
            }
        }

        trajectory.push(t, pose)?;
        masks.push((idx as u32, scene.mask.clone()));
        map_sizes.push(map.len());
        prev = Some(PrevRadar {
            pose,
            velocity: velocity_world,
            t,
            tree: scene.tree,
            clusters: scene.clusters,
        });
    }

    if !pending_images.is_empty() {
        events.push(format!(
            "{} camera-only frames after the last radar frame were not used",
            pending_images.len()
        ));
    }

    Ok(RunOutputs {
        trajectory,
        map,
        masks,
        loss_log,
        events,
        keyframe_count,
        map_sizes,
    })
}

/// Renders the map at every estimated pose that matches a radar frame and
/// scores it against the dataset images, mover pixels excluded via `masks`
/// (keyed by dataset frame index, empty masks assumed where missing).
pub fn eval_rendering(
    dataset: &Dataset,
    estimate: &TrajectoryRecord,
    map: &GaussianMap,
    masks: &[(u32, PixelMask)],
) -> Result<RenderMetrics> {
    let mut rendered = Vec::new();
    let mut observed = Vec::new();
    let mut used_masks = Vec::new();
    let (width, height) = (dataset.camera.width as usize, dataset.camera.height as usize);
    for (idx, frame) in dataset.frames.iter().enumerate() {
        if frame.image_only {
            continue;
        }
        let Some(pose) = estimate
            .samples()
            .iter()
            .find(|(t, _)| (t - frame.timestamp).abs() <= ASSOCIATION_TOLERANCE)
            .map(|&(_, p)| p)
        else {
            continue;
        };
        rendered.push(render(map, &world_to_camera(&pose), &dataset.camera).color);
        observed.push(frame.image.clone());
        used_masks.push(
            masks
                .iter()
                .find(|(i, _)| *i == idx as u32)
                .map(|(_, m)| m.clone())
                .unwrap_or_else(|| PixelMask::empty(width, height)),
        );
    }
    if rendered.is_empty() {
        return Err(Error::data(
            "no estimated poses match the dataset's radar frames",
        ));
    }
    crate::metrics::eval_render(&rendered, &observed, Some(&used_masks))
}
