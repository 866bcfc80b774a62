//! Deterministic synthetic world: analytic ground/box/cylinder primitives,
//! radar frames with physically consistent Doppler, dense labeled surface
//! clouds, ray-cast camera images, and analytic trajectories. Serves as the
//! ground-truth oracle for the end-to-end tests.
//!
//! Frames are pure functions of (world, pose, time): every random draw comes
//! from a stream seeded by (world seed, purpose salt, time bits), so replay
//! is bit-identical without carrying generator state between frames.
//!
//! Conventions shared with the rest of the crate: body/sensor frame is
//! x forward, y left, z up; the camera sits at the body origin with z
//! forward, x right, y down. Doppler is ray^T v_sensor, positive when the
//! platform closes on a static target, exactly the model the ego-velocity
//! solver inverts. A moving target measures ray^T R^T (v_ego - v_target).

use crate::doppler::RadarDetection;
use crate::error::{Error, Result};
use crate::geometry::{
    add3, dot3, mat3_transpose, mat3_vec, norm3, normalize3, scale3, sub3, Mat3, Pose, Vec3,
    IDENTITY3,
};
use crate::image::{CameraIntrinsics, ColorImage};
use crate::mask::Box2i;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// Fixed camera mounting: p_body = CAMERA_TO_BODY * p_camera. Camera z
/// (forward) maps to body x, camera x (right) to body -y, camera y (down)
/// to body -z. The camera shares the body origin (no lever arm).
pub const CAMERA_TO_BODY: Mat3 = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];

/// World-to-camera transform for a body-in-world pose.
pub fn world_to_camera(body_in_world: &Pose) -> Pose {
    let cam_in_world = body_in_world.compose(&Pose::new(CAMERA_TO_BODY, [0.0; 3], 0.0));
    let mut out = cam_in_world.inverse();
    out.stamp = body_in_world.stamp;
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceSpec {
    /// Horizontal plane z = height with a two-tone checker albedo.
    Ground { height: f64, albedo: [f64; 3] },
    /// Axis-aligned box.
    Box {
        center: Vec3,
        half_extents: Vec3,
        albedo: [f64; 3],
    },
    /// Vertical cylinder standing on `base` (center of the bottom cap).
    Cylinder {
        base: Vec3,
        radius: f64,
        height: f64,
        albedo: [f64; 3],
    },
}

/// Rigid box translating at constant world velocity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoverSpec {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub albedo: [f64; 3],
    pub velocity: Vec3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadarSpec {
    /// Full azimuth field of view, radians.
    pub fov_azimuth: f64,
    /// Full elevation field of view, radians.
    pub fov_elevation: f64,
    pub max_range: f64,
    pub detections_per_frame: usize,
    pub range_sigma: f64,
    pub doppler_sigma: f64,
    pub angle_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub statics: Vec<SurfaceSpec>,
    pub movers: Vec<MoverSpec>,
    pub radar: RadarSpec,
    pub camera: CameraIntrinsics,
    /// Enhanced-cloud sampling density, points per square meter.
    pub enhanced_density: f64,
}

impl WorldSpec {
    /// Campus-like default: ground plane, six building boxes, four pillar
    /// cylinders, and two oncoming movers along the +x corridor.
    pub fn campus(seed: u64) -> Self {
        let gray = |r: f64, g: f64, b: f64| [r, g, b];
        let mut statics = vec![SurfaceSpec::Ground {
            height: 0.0,
            albedo: gray(0.42, 0.48, 0.36),
        }];
        let boxes: [(f64, f64, f64, f64, f64, [f64; 3]); 6] = [
            (8.0, 5.5, 2.0, 1.5, 2.0, gray(0.70, 0.38, 0.30)),
            (13.0, -6.0, 2.5, 2.0, 2.5, gray(0.36, 0.44, 0.66)),
            (19.0, 6.5, 1.8, 1.8, 3.0, gray(0.62, 0.58, 0.40)),
            (24.0, -5.0, 2.2, 1.4, 2.2, gray(0.48, 0.30, 0.34)),
            (30.0, 5.0, 2.5, 2.0, 3.5, gray(0.70, 0.66, 0.58)),
            (36.0, -6.5, 2.0, 2.0, 2.8, gray(0.34, 0.52, 0.46)),
        ];
        for (x, y, hx, hy, hz, albedo) in boxes {
            statics.push(SurfaceSpec::Box {
                center: [x, y, hz],
                half_extents: [hx, hy, hz],
                albedo,
            });
        }
        let pillars: [(f64, f64, [f64; 3]); 4] = [
            (10.0, 3.2, gray(0.45, 0.36, 0.26)),
            (16.0, -3.4, gray(0.30, 0.46, 0.28)),
            (22.0, 3.4, gray(0.45, 0.36, 0.26)),
            (28.0, -3.2, gray(0.30, 0.46, 0.28)),
        ];
        for (x, y, albedo) in pillars {
            statics.push(SurfaceSpec::Cylinder {
                base: [x, y, 0.0],
                radius: 0.3,
                height: 2.5,
                albedo,
            });
        }
        WorldSpec {
            seed,
            statics,
            movers: vec![
                MoverSpec {
                    center: [18.0, 0.9, 0.6],
                    half_extents: [0.9, 0.5, 0.6],
                    albedo: gray(0.82, 0.78, 0.24),
                    velocity: [-3.0, 0.0, 0.0],
                },
                MoverSpec {
                    center: [26.0, -1.0, 0.6],
                    half_extents: [0.9, 0.5, 0.6],
                    albedo: gray(0.26, 0.60, 0.78),
                    velocity: [-4.0, 0.0, 0.0],
                },
            ],
            radar: RadarSpec {
                fov_azimuth: 1.2,
                fov_elevation: 0.8,
                max_range: 25.0,
                detections_per_frame: 120,
                range_sigma: 0.02,
                doppler_sigma: 0.02,
                angle_sigma: 0.002,
            },
            camera: CameraIntrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
            },
            enhanced_density: 12.0,
        }
    }
}

/// Immutable world. Geometry overlap between movers and statics is reported
/// as warnings, never as an error.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub warnings: Vec<String>,
}

pub fn build_world(spec: WorldSpec) -> Result<World> {
    spec.camera.validate()?;
    let r = &spec.radar;
    if !(r.fov_azimuth > 0.0 && r.fov_azimuth <= 2.0 * std::f64::consts::PI) {
        return Err(Error::config("fov_azimuth", "must lie in (0, 2pi]"));
    }
    if !(r.fov_elevation > 0.0 && r.fov_elevation <= std::f64::consts::PI) {
        return Err(Error::config("fov_elevation", "must lie in (0, pi]"));
    }
    if !(r.max_range > 0.0) {
        return Err(Error::config("max_range", "must be positive"));
    }
    if !(r.range_sigma >= 0.0 && r.doppler_sigma >= 0.0 && r.angle_sigma >= 0.0) {
        return Err(Error::config("radar noise", "sigmas must be non-negative"));
    }
    if !(spec.enhanced_density >= 0.0) {
        return Err(Error::config("enhanced_density", "must be non-negative"));
    }
    for s in &spec.statics {
        validate_surface(s)?;
    }
    let mut warnings = Vec::new();
    for (i, m) in spec.movers.iter().enumerate() {
        if !(m.half_extents[0] > 0.0 && m.half_extents[1] > 0.0 && m.half_extents[2] > 0.0) {
            return Err(Error::config("mover", "half extents must be positive"));
        }
        // Separability floor keeps ground-truth labels meaningful.
        if !(norm3(m.velocity) > 5.0 * r.doppler_sigma) {
            return Err(Error::config(
                "mover velocity",
                "speed must exceed 5x doppler sigma",
            ));
        }
        for (j, s) in spec.statics.iter().enumerate() {
            if mover_overlaps_static(m, s) {
                warnings.push(format!("mover {i} overlaps static primitive {j} at t=0"));
            }
        }
    }
    Ok(World { spec, warnings })
}

fn validate_surface(s: &SurfaceSpec) -> Result<()> {
    match s {
        SurfaceSpec::Ground { .. } => Ok(()),
        SurfaceSpec::Box { half_extents, .. } => {
            if half_extents.iter().all(|&h| h > 0.0) {
                Ok(())
            } else {
                Err(Error::config("box", "half extents must be positive"))
            }
        }
        SurfaceSpec::Cylinder { radius, height, .. } => {
            if *radius > 0.0 && *height > 0.0 {
                Ok(())
            } else {
                Err(Error::config("cylinder", "radius and height must be positive"))
            }
        }
    }
}

fn mover_overlaps_static(m: &MoverSpec, s: &SurfaceSpec) -> bool {
    let lo = sub3(m.center, m.half_extents);
    let hi = add3(m.center, m.half_extents);
    match s {
        SurfaceSpec::Ground { height, .. } => lo[2] < *height,
        SurfaceSpec::Box {
            center,
            half_extents,
            ..
        } => {
            let slo = sub3(*center, *half_extents);
            let shi = add3(*center, *half_extents);
            (0..3).all(|i| lo[i] <= shi[i] && hi[i] >= slo[i])
        }
        SurfaceSpec::Cylinder {
            base,
            radius,
            height,
            ..
        } => {
            let cx = base[0].clamp(lo[0], hi[0]) - base[0];
            let cy = base[1].clamp(lo[1], hi[1]) - base[1];
            cx * cx + cy * cy <= radius * radius
                && lo[2] <= base[2] + height
                && hi[2] >= base[2]
        }
    }
}

// ---------------------------------------------------------------------------
// Scene geometry at a fixed time
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ground { height: f64 },
    Aabb { min: Vec3, max: Vec3 },
    Cylinder { base: Vec3, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Surface {
    shape: Shape,
    albedo: [f64; 3],
    /// Two-tone checker applied to ground planes only.
    checker: bool,
    mover: Option<usize>,
}

fn scene_at(world: &World, t: f64) -> Vec<Surface> {
    let mut out = Vec::with_capacity(world.spec.statics.len() + world.spec.movers.len());
    for s in &world.spec.statics {
        out.push(match *s {
            SurfaceSpec::Ground { height, albedo } => Surface {
                shape: Shape::Ground { height },
                albedo,
                checker: true,
                mover: None,
            },
            SurfaceSpec::Box {
                center,
                half_extents,
                albedo,
            } => Surface {
                shape: Shape::Aabb {
                    min: sub3(center, half_extents),
                    max: add3(center, half_extents),
                },
                albedo,
                checker: false,
                mover: None,
            },
            SurfaceSpec::Cylinder {
                base,
                radius,
                height,
                albedo,
            } => Surface {
                shape: Shape::Cylinder {
                    base,
                    radius,
                    height,
                },
                albedo,
                checker: false,
                mover: None,
            },
        });
    }
    for (i, m) in world.spec.movers.iter().enumerate() {
        let center = add3(m.center, scale3(m.velocity, t));
        out.push(Surface {
            shape: Shape::Aabb {
                min: sub3(center, m.half_extents),
                max: add3(center, m.half_extents),
            },
            albedo: m.albedo,
            checker: false,
            mover: Some(i),
        });
    }
    out
}

/// Surface color at a world point: flat albedo, except ground planes carry a
/// 4 m two-tone checker so images are not featureless.
fn albedo_at(surface: &Surface, p: Vec3) -> [f64; 3] {
    if !surface.checker {
        return surface.albedo;
    }
    let cell = (p[0] / 4.0).floor() as i64 + (p[1] / 4.0).floor() as i64;
    let tone = if cell.rem_euclid(2) == 0 { 1.08 } else { 0.92 };
    [
        (surface.albedo[0] * tone).clamp(0.0, 1.0),
        (surface.albedo[1] * tone).clamp(0.0, 1.0),
        (surface.albedo[2] * tone).clamp(0.0, 1.0),
    ]
}

const RAY_EPS: f64 = 1e-9;

struct RayHit {
    t: f64,
    normal: Vec3,
    surface: usize,
}

fn intersect(shape: &Shape, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    match *shape {
        Shape::Ground { height } => {
            if dir[2].abs() < 1e-12 {
                return None;
            }
            let t = (height - origin[2]) / dir[2];
            if t <= RAY_EPS {
                return None;
            }
            let n = if origin[2] >= height {
                [0.0, 0.0, 1.0]
            } else {
                [0.0, 0.0, -1.0]
            };
            Some((t, n))
        }
        Shape::Aabb { min, max } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis = 0usize;
            for i in 0..3 {
                if dir[i].abs() < 1e-12 {
                    if origin[i] < min[i] || origin[i] > max[i] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / dir[i];
                let (mut t0, mut t1) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    axis = i;
                }
                t_exit = t_exit.min(t1);
            }
            if t_enter > t_exit || t_enter <= RAY_EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -dir[axis].signum();
            Some((t_enter, n))
        }
        Shape::Cylinder {
            base,
            radius,
            height,
        } => {
            let mut best: Option<(f64, Vec3)> = None;
            let (ox, oy) = (origin[0] - base[0], origin[1] - base[1]);
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            if a > 1e-12 {
                let b = ox * dir[0] + oy * dir[1];
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / a, (-b + sq) / a] {
                        if t <= RAY_EPS {
                            continue;
                        }
                        let z = origin[2] + t * dir[2];
                        if z < base[2] || z > base[2] + height {
                            continue;
                        }
                        let n = normalize3([
                            origin[0] + t * dir[0] - base[0],
                            origin[1] + t * dir[1] - base[1],
                            0.0,
                        ]);
                        if best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, n));
                        }
                        break;
                    }
                }
            }
            if dir[2].abs() > 1e-12 {
                for (cap_z, n) in [(base[2] + height, [0.0, 0.0, 1.0]), (base[2], [0.0, 0.0, -1.0])]
                {
                    let t = (cap_z - origin[2]) / dir[2];
                    if t <= RAY_EPS {
                        continue;
                    }
                    let x = origin[0] + t * dir[0] - base[0];
                    let y = origin[1] + t * dir[1] - base[1];
                    if x * x + y * y <= radius * radius && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                }
            }
            best
        }
    }
}

fn ray_cast(scene: &[Surface], origin: Vec3, dir: Vec3) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (i, s) in scene.iter().enumerate() {
        if let Some((t, normal)) = intersect(&s.shape, origin, dir) {
            if best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(RayHit {
                    t,
                    normal,
                    surface: i,
                });
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

/// Sampling area of one surface. Ground planes are truncated to a disc of
/// `ground_radius` around the sensor; occlusion rejection handles hidden
/// faces, so boxes and cylinders count their full surface.
fn surface_area(shape: &Shape, ground_radius: f64) -> f64 {
    match *shape {
        Shape::Ground { .. } => std::f64::consts::PI * ground_radius * ground_radius,
        Shape::Aabb { min, max } => {
            let d = sub3(max, min);
            2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
        }
        Shape::Cylinder { radius, height, .. } => {
            2.0 * std::f64::consts::PI * radius * height
                + 2.0 * std::f64::consts::PI * radius * radius
        }
    }
}

/// Uniform point on the surface (ground: uniform on the truncated disc).
fn sample_surface(
    shape: &Shape,
    rng: &mut ChaCha12Rng,
    sensor_xy: [f64; 2],
    ground_radius: f64,
) -> Vec3 {
    match *shape {
        Shape::Ground { height } => {
            let r = ground_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            [
                sensor_xy[0] + r * phi.cos(),
                sensor_xy[1] + r * phi.sin(),
                height,
            ]
        }
        Shape::Aabb { min, max } => {
            let d = sub3(max, min);
            let areas = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
            let total = 2.0 * (areas[0] + areas[1] + areas[2]);
            let mut pick = rng.random_range(0.0..total);
            for axis in 0..3 {
                for bound in [min, max] {
                    if pick < areas[axis] {
                        let mut p = [0.0; 3];
                        p[axis] = bound[axis];
                        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                        p[u] = rng.random_range(min[u]..max[u]);
                        p[v] = rng.random_range(min[v]..max[v]);
                        return p;
                    }
                    pick -= areas[axis];
                }
            }
            // Rounding fallthrough: land on the +z face.
            [
                rng.random_range(min[0]..max[0]),
                rng.random_range(min[1]..max[1]),
                max[2],
            ]
        }
        Shape::Cylinder {
            base,
            radius,
            height,
        } => {
            let lateral = std::f64::consts::TAU * radius * height;
            let cap = std::f64::consts::PI * radius * radius;
            let pick = rng.random_range(0.0..lateral + 2.0 * cap);
            if pick < lateral {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(0.0..height);
                [
                    base[0] + radius * phi.cos(),
                    base[1] + radius * phi.sin(),
                    base[2] + z,
                ]
            } else {
                let z = if pick < lateral + cap { height } else { 0.0 };
                let r = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                [
                    base[0] + r * phi.cos(),
                    base[1] + r * phi.sin(),
                    base[2] + z,
                ]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Frame generation
// ---------------------------------------------------------------------------

const SALT_RADAR_GEOMETRY: u64 = 1;
const SALT_RADAR_NOISE: u64 = 2;
const SALT_ENHANCED: u64 = 3;

/// Per-frame random stream: splitmix64 finalizer over (seed, salt, time).
fn frame_rng(seed: u64, salt: u64, t: f64) -> ChaCha12Rng {
    let mut z = seed
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ t.to_bits().rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

struct SurfaceHit {
    point: Vec3,
    mover: Option<usize>,
    albedo: [f64; 3],
}

/// Noise-free radar hit geometry: visible in-FOV surface points, sampled
/// uniformly over primitives then over each primitive's surface. Shared
/// verbatim by the enhanced cloud so every raw detection is anchored there.
fn raw_surface_hits(world: &World, pose: &Pose, t: f64) -> Vec<SurfaceHit> {
    let scene = scene_at(world, t);
    if scene.is_empty() {
        return Vec::new();
    }
    let spec = &world.spec.radar;
    let mut rng = frame_rng(world.spec.seed, SALT_RADAR_GEOMETRY, t);
    let origin = pose.translation;
    let r_bw = mat3_transpose(&pose.rotation);
    let budget = spec.detections_per_frame;
    let mut hits = Vec::with_capacity(budget);
    let mut attempts = 0usize;
    let max_attempts = budget.max(1) * 80;
    while hits.len() < budget && attempts < max_attempts {
        attempts += 1;
        let idx = rng.random_range(0..scene.len());
        let point = sample_surface(
            &scene[idx].shape,
            &mut rng,
            [origin[0], origin[1]],
            spec.max_range,
        );
        let to = sub3(point, origin);
        let dist = norm3(to);
        if dist < 0.3 || dist > spec.max_range {
            continue;
        }
        let p_body = mat3_vec(&r_bw, to);
        let azimuth = p_body[1].atan2(p_body[0]);
        let elevation = p_body[2].atan2((p_body[0] * p_body[0] + p_body[1] * p_body[1]).sqrt());
        if azimuth.abs() > spec.fov_azimuth / 2.0 || elevation.abs() > spec.fov_elevation / 2.0 {
            continue;
        }
        let dir = scale3(to, 1.0 / dist);
        let Some(hit) = ray_cast(&scene, origin, dir) else {
            continue;
        };
        if hit.surface != idx || (hit.t - dist).abs() > 1e-6 * dist.max(1.0) {
            continue;
        }
        hits.push(SurfaceHit {
            point,
            mover: scene[idx].mover,
            albedo: albedo_at(&scene[idx], point),
        });
    }
    hits
}

/// One radar frame. Doppler follows the shared measurement model: a static
/// target reads ray^T (R^T v_ego_world); a mover with world velocity v_t
/// reads ray^T R^T (v_ego_world - v_t). Gaussian noise is added per the
/// radar spec and the ground-truth dynamic flag is filled in.
pub fn radar_frame(world: &World, pose: &Pose, v_ego_world: Vec3, t: f64) -> Vec<RadarDetection> {
    let hits = raw_surface_hits(world, pose, t);
    let spec = &world.spec.radar;
    let mut rng = frame_rng(world.spec.seed, SALT_RADAR_NOISE, t);
    let range_noise = Normal::new(0.0, spec.range_sigma).expect("validated sigma");
    let doppler_noise = Normal::new(0.0, spec.doppler_sigma).expect("validated sigma");
    let angle_noise = Normal::new(0.0, spec.angle_sigma).expect("validated sigma");
    let r_bw = mat3_transpose(&pose.rotation);
    let origin = pose.translation;
    hits.iter()
        .map(|hit| {
            let p_body = mat3_vec(&r_bw, sub3(hit.point, origin));
            let range = norm3(p_body);
            let ray = scale3(p_body, 1.0 / range);
            let v_rel_world = match hit.mover {
                None => v_ego_world,
                Some(m) => sub3(v_ego_world, world.spec.movers[m].velocity),
            };
            let doppler = dot3(ray, mat3_vec(&r_bw, v_rel_world));
            let azimuth = p_body[1].atan2(p_body[0]) + angle_noise.sample(&mut rng);
            let elevation = p_body[2]
                .atan2((p_body[0] * p_body[0] + p_body[1] * p_body[1]).sqrt())
                + angle_noise.sample(&mut rng);
            RadarDetection {
                theta_y: azimuth,
                theta_p: elevation,
                range: (range + range_noise.sample(&mut rng)).max(0.01),
                doppler: doppler + doppler_noise.sample(&mut rng),
                power: rng.random_range(5.0..30.0),
                dynamic: Some(hit.mover.is_some()),
            }
        })
        .collect()
}

/// Dense labeled surface cloud in the body frame: Poisson surface sampling
/// restricted to the camera frustum and radar range, with colors quantized
/// to 8-bit steps (lossless through image/PLY export), plus the noise-free
/// anchor points under the frame's raw detections.
#[derive(Debug, Clone, Default)]
pub struct EnhancedCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<bool>,
}

impl EnhancedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn quantize_color(c: [f64; 3]) -> [f64; 3] {
    [
        (c[0].clamp(0.0, 1.0) * 255.0).round() / 255.0,
        (c[1].clamp(0.0, 1.0) * 255.0).round() / 255.0,
        (c[2].clamp(0.0, 1.0) * 255.0).round() / 255.0,
    ]
}

pub fn enhanced_frame(world: &World, pose: &Pose, density: f64, t: f64) -> EnhancedCloud {
    let scene = scene_at(world, t);
    let mut cloud = EnhancedCloud::default();
    if scene.is_empty() {
        return cloud;
    }
    let mut rng = frame_rng(world.spec.seed, SALT_ENHANCED, t);
    let cam_pose = world_to_camera(pose);
    let camera = &world.spec.camera;
    let origin = pose.translation;
    let max_range = world.spec.radar.max_range;
    let body_from_world = pose.inverse();

    let keep = |point: Vec3, surface: &Surface, cloud: &mut EnhancedCloud| {
        let to = sub3(point, origin);
        let dist = norm3(to);
        if dist < 0.3 || dist > max_range {
            return;
        }
        let p_cam = cam_pose.transform_point(point);
        let Some((u, v)) = camera.project(p_cam) else {
            return;
        };
        if u < 0.0 || v < 0.0 || u > (camera.width - 1) as f64 || v > (camera.height - 1) as f64 {
            return;
        }
        let dir = scale3(to, 1.0 / dist);
        let Some(hit) = ray_cast(&scene, origin, dir) else {
            return;
        };
        if (hit.t - dist).abs() > 1e-6 * dist.max(1.0) {
            return;
        }
        cloud.points.push(body_from_world.transform_point(point));
        cloud.colors.push(quantize_color(albedo_at(surface, point)));
        cloud.labels.push(surface.mover.is_some());
    };

    if density > 0.0 {
        for surface in &scene {
            let lambda = density * surface_area(&surface.shape, max_range);
            if lambda <= 0.0 {
                continue;
            }
            let count = Poisson::new(lambda).expect("positive lambda").sample(&mut rng) as usize;
            for _ in 0..count {
                let point =
                    sample_surface(&surface.shape, &mut rng, [origin[0], origin[1]], max_range);
                keep(point, surface, &mut cloud);
            }
        }
    }

    // Anchor the raw detections: the same geometry stream radar_frame uses,
    // so every raw hit has a noise-free enhanced counterpart.
    for hit in raw_surface_hits(world, pose, t) {
        let surface = Surface {
            shape: Shape::Ground { height: 0.0 },
            albedo: hit.albedo,
            checker: false,
            mover: hit.mover,
        };
        keep(hit.point, &surface, &mut cloud);
    }
    cloud
}

/// Direction toward the fixed light source: normalized (0.3, -0.2, 0.8).
const LIGHT_TOWARD: Vec3 = [
    0.341_881_729_378_913_85,
    -0.227_921_152_919_275_9,
    0.911_684_611_677_103_6,
];

fn shade(albedo: [f64; 3], normal: Vec3) -> [f64; 3] {
    let lambert = dot3(normal, LIGHT_TOWARD).max(0.0);
    let b = 0.35 + 0.65 * lambert;
    [albedo[0] * b, albedo[1] * b, albedo[2] * b]
}

const BACKGROUND: [f64; 3] = [0.62, 0.73, 0.88];

fn raycast_image(
    world: &World,
    pose: &Pose,
    camera: &CameraIntrinsics,
    t: f64,
) -> (ColorImage, Vec<i32>) {
    let scene = scene_at(world, t);
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut img = ColorImage::new(w, h);
    let mut mover_ids = vec![-1i32; w * h];
    let cam_to_world = pose.compose(&Pose::new(CAMERA_TO_BODY, [0.0; 3], 0.0));
    let origin = cam_to_world.translation;
    for y in 0..h {
        for x in 0..w {
            let d_cam = camera.unproject(x as f64, y as f64);
            let dir = mat3_vec(&cam_to_world.rotation, d_cam);
            match ray_cast(&scene, origin, dir) {
                Some(hit) => {
                    let s = &scene[hit.surface];
                    let p = add3(origin, scale3(dir, hit.t));
                    img.set(x, y, shade(albedo_at(s, p), hit.normal));
                    if let Some(m) = s.mover {
                        mover_ids[y * w + x] = m as i32;
                    }
                }
                None => img.set(x, y, BACKGROUND),
            }
        }
    }
    (img, mover_ids)
}

/// Analytic ray-cast image: nearest primitive hit, flat albedo with fixed
/// directional lighting, sky background, channels quantized to 8-bit steps.
pub fn camera_frame(world: &World, pose: &Pose, camera: &CameraIntrinsics, t: f64) -> ColorImage {
    raycast_image(world, pose, camera, t).0.quantized()
}

/// Pixel-accurate silhouette bounding box per mover (None when off-screen),
/// from the same ray cast that produces camera_frame.
pub fn mover_silhouette_boxes(
    world: &World,
    pose: &Pose,
    camera: &CameraIntrinsics,
    t: f64,
) -> Vec<Option<Box2i>> {
    let (_, mover_ids) = raycast_image(world, pose, camera, t);
    let w = camera.width as usize;
    let mut boxes = vec![None; world.spec.movers.len()];
    for (i, &m) in mover_ids.iter().enumerate() {
        if m < 0 {
            continue;
        }
        let (x, y) = ((i % w) as i32, (i / w) as i32);
        let entry = &mut boxes[m as usize];
        match entry {
            None => {
                *entry = Some(Box2i {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                })
            }
            Some(b) => {
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x);
                b.y1 = b.y1.max(y);
            }
        }
    }
    boxes
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Loop,
    Arc,
}

fn yaw_rotation(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Analytic body pose and world velocity at time `t` along the path.
/// Line runs along +x; loop is a full circle returning to the start; arc is
/// a quarter turn. All at height 1 m, constant speed.
pub fn trajectory_state(
    kind: TrajectoryKind,
    length: f64,
    speed: f64,
    t: f64,
) -> Result<(Pose, Vec3)> {
    if !(length > 0.0 && speed > 0.0) {
        return Err(Error::config("trajectory", "length and speed must be positive"));
    }
    let height = 1.0;
    Ok(match kind {
        TrajectoryKind::Line => (
            Pose::new(IDENTITY3, [speed * t, 0.0, height], t),
            [speed, 0.0, 0.0],
        ),
        TrajectoryKind::Loop | TrajectoryKind::Arc => {
            let radius = match kind {
                TrajectoryKind::Loop => length / std::f64::consts::TAU,
                _ => 2.0 * length / std::f64::consts::PI,
            };
            let theta = speed * t / radius;
            (
                Pose::new(
                    yaw_rotation(theta),
                    [
                        radius * theta.sin(),
                        radius * (1.0 - theta.cos()),
                        height,
                    ],
                    t,
                ),
                [speed * theta.cos(), speed * theta.sin(), 0.0],
            )
        }
    })
}

/// `count` stamped poses with exact analytic velocities, evenly spaced over
/// the whole path.
pub fn sample_trajectory(
    kind: TrajectoryKind,
    length: f64,
    count: usize,
    speed: f64,
) -> Result<Vec<(Pose, Vec3)>> {
    if count < 2 {
        return Err(Error::config("count", "need at least two poses"));
    }
    let duration = length / speed;
    let dt = duration / (count - 1) as f64;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(trajectory_state(kind, length, speed, i as f64 * dt)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Packets
// ---------------------------------------------------------------------------

/// Everything one timestamp yields: raw radar (sensor frame, ground-truth
/// dynamic flags), enhanced cloud (body frame), camera image, and ground
/// truth pose/velocity.
#[derive(Debug, Clone)]
pub struct FramePacket {
    pub timestamp: f64,
    pub raw: Vec<RadarDetection>,
    pub enhanced: EnhancedCloud,
    pub image: ColorImage,
    pub gt_pose: Pose,
    pub gt_velocity: Vec3,
}

pub fn generate_packet(world: &World, pose: &Pose, v_ego_world: Vec3, t: f64) -> FramePacket {
    let mut gt_pose = *pose;
    gt_pose.stamp = t;
    FramePacket {
        timestamp: t,
        raw: radar_frame(world, pose, v_ego_world, t),
        enhanced: enhanced_frame(world, pose, world.spec.enhanced_density, t),
        image: camera_frame(world, pose, &world.spec.camera, t),
        gt_pose,
        gt_velocity: v_ego_world,
    }
}
