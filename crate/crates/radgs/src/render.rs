//! CPU splat renderer: color, depth, and alpha from the Gaussian map by
//! front-to-back alpha compositing, plus exact reverse-mode gradients.
//!
//! Each primitive projects to a 2D Gaussian (EWA first-order model): with W
//! the world-to-camera rotation and p = (x, y, z) the camera-frame mean,
//!
//!   cov2d = J (W Sigma W^T) J^T + 0.3 I,   J = [fx/z  0     -fx x/z^2]
//!                                              [0     fy/z  -fy y/z^2]
//!
//! Per pixel, splats sorted by depth (id breaks ties) composite as
//!
//!   alpha_i = min(opacity_i exp(-1/2 d^T cov2d^{-1} d), 0.99)
//!   C = sum c_i alpha_i T_i,  D = sum z_i alpha_i T_i,  A = sum alpha_i T_i
//!
//! with transmittance T_i = prod_{j<i} (1 - alpha_j), early-stopped below
//! 1e-4. Rasterization covers the 3 sigma ellipse of each splat.

use crate::geometry::{mat3_mul, mat3_transpose, mat3_vec, Mat3, Pose, Vec3};
use crate::image::{CameraIntrinsics, ColorImage, ScalarImage};
use crate::map::{GaussianMap, GaussianPrimitive};

/// Camera-frame z below which a primitive is culled, meters.
pub const NEAR_PLANE: f64 = 0.1;
/// Isotropic variance added to every projected covariance, px^2.
pub const COV2D_FLOOR: f64 = 0.3;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Upper clamp on per-splat alpha; keeps transmittance positive.
pub const ALPHA_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Alpha-composited depth in meters, 0 where nothing rendered.
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Camera-frame z of the mean, meters.
    pub depth: f64,
}

/// Adjoint (upstream gradient) images for [`render_with_grads`]; same shape
/// as the corresponding render outputs.
#[derive(Debug, Clone)]
pub struct RenderAdjoints {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
}

impl RenderAdjoints {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderAdjoints {
            color: ColorImage::new(width, height),
            depth: ScalarImage::new(width, height),
            alpha: ScalarImage::new(width, height),
        }
    }
}

/// Per-primitive gradients, indexed by primitive id (dead slots stay zero).
/// `d_cov` holds elementwise adjoints of the symmetric world covariance: the
/// directional derivative along a symmetric perturbation E of Sigma is
/// sum_ab d_cov[a][b] E[a][b].
#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub d_mean: Vec<Vec3>,
    pub d_cov: Vec<Mat3>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

impl RenderGradients {
    fn zeros(slots: usize) -> Self {
        RenderGradients {
            d_mean: vec![[0.0; 3]; slots],
            d_cov: vec![[[0.0; 3]; 3]; slots],
            d_opacity: vec![0.0; slots],
            d_color: vec![[0.0; 3]; slots],
        }
    }
}

/// EWA projection of one primitive. None when the camera-frame mean lies at
/// or before the near plane.
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    world_to_camera: &Pose,
    camera: &CameraIntrinsics,
) -> Option<SplatProjection> {
    let p = world_to_camera.transform_point(prim.mean);
    if p[2] <= NEAR_PLANE {
        return None;
    }
    let (u, v) = (
        camera.fx * p[0] / p[2] + camera.cx,
        camera.fy * p[1] / p[2] + camera.cy,
    );
    let w = &world_to_camera.rotation;
    let sigma_c = mat3_mul(w, &mat3_mul(&prim.cov, &mat3_transpose(w)));
    let j = perspective_jacobian(camera, p);
    let mut cov2d = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                for k in 0..3 {
                    s += j[a][i] * sigma_c[i][k] * j[b][k];
                }
            }
            cov2d[a][b] = s;
        }
    }
    cov2d[0][0] += COV2D_FLOOR;
    cov2d[1][1] += COV2D_FLOOR;
    Some(SplatProjection {
        mean2d: [u, v],
        cov2d,
        depth: p[2],
    })
}

/// Derivative of (u, v) with respect to the camera-frame point, evaluated at
/// the splat mean. Rows: u then v.
fn perspective_jacobian(camera: &CameraIntrinsics, p: Vec3) -> [[f64; 3]; 2] {
    let z = p[2];
    [
        [camera.fx / z, 0.0, -camera.fx * p[0] / (z * z)],
        [0.0, camera.fy / z, -camera.fy * p[1] / (z * z)],
    ]
}

/// One projected primitive ready for rasterization.
struct Splat {
    id: u32,
    mean2d: [f64; 2],
    /// Inverse of cov2d.
    conic: [[f64; 2]; 2],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    /// Inclusive pixel bounds of the 3 sigma footprint.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    /// Camera-frame mean, kept for the backward pass.
    p_cam: Vec3,
}

/// Project every alive primitive, cull, and sort by (depth, id).
fn project_splats(
    map: &GaussianMap,
    world_to_camera: &Pose,
    camera: &CameraIntrinsics,
) -> Vec<Splat> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut splats = Vec::new();
    for id in map.alive_ids() {
        let prim = map.get(id);
        let Some(proj) = project_gaussian(prim, world_to_camera, camera) else {
            continue;
        };
        let c = proj.cov2d;
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        if det <= 0.0 {
            continue;
        }
        let conic = [
            [c[1][1] / det, -c[0][1] / det],
            [-c[1][0] / det, c[0][0] / det],
        ];
        // Conservative footprint: 3 sigma of the larger eigenvalue.
        let half_trace = 0.5 * (c[0][0] + c[1][1]);
        let half_gap = 0.5 * (c[0][0] - c[1][1]);
        let lam_max = half_trace + (half_gap * half_gap + c[0][1] * c[0][1]).sqrt();
        let r = 3.0 * lam_max.max(0.0).sqrt();
        let x0 = (proj.mean2d[0] - r).ceil().max(0.0);
        let x1 = (proj.mean2d[0] + r).floor().min(w as f64 - 1.0);
        let y0 = (proj.mean2d[1] - r).ceil().max(0.0);
        let y1 = (proj.mean2d[1] + r).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Splat {
            id,
            mean2d: proj.mean2d,
            conic,
            depth: proj.depth,
            opacity: prim.opacity,
            color: prim.color,
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
            p_cam: world_to_camera.transform_point(prim.mean),
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("splat depths are finite")
            .then(a.id.cmp(&b.id))
    });
    splats
}

/// One compositing term at one pixel, recorded for the backward pass.
#[derive(Clone, Copy)]
struct Term {
    splat: u32,
    alpha: f64,
    /// Transmittance in front of this term.
    trans: f64,
    /// True when alpha hit the 0.99 clamp (gradient is zero there).
    clamped: bool,
}

/// Shared forward pass. When `record` is set, every composited term is
/// pushed into `tape[pixel]`.
fn composite(
    splats: &[Splat],
    camera: &CameraIntrinsics,
    record: bool,
    tape: &mut Vec<Vec<Term>>,
) -> RenderOutput {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut color = ColorImage::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha = ScalarImage::new(w, h);
    let mut trans = vec![1.0f64; w * h];
    if record {
        tape.clear();
        tape.resize(w * h, Vec::new());
    }
    for (si, s) in splats.iter().enumerate() {
        for py in s.y0..=s.y1 {
            for px in s.x0..=s.x1 {
                let idx = py * w + px;
                let t = trans[idx];
                if t < TRANSMITTANCE_FLOOR {
                    continue;
                }
                let d = [px as f64 - s.mean2d[0], py as f64 - s.mean2d[1]];
                let q = d[0] * (s.conic[0][0] * d[0] + s.conic[0][1] * d[1])
                    + d[1] * (s.conic[1][0] * d[0] + s.conic[1][1] * d[1]);
                let raw = s.opacity * (-0.5 * q).exp();
                let clamped = raw > ALPHA_MAX;
                let a = if clamped { ALPHA_MAX } else { raw };
                let weight = a * t;
                let px_color = &mut color.data[idx];
                px_color[0] += s.color[0] * weight;
                px_color[1] += s.color[1] * weight;
                px_color[2] += s.color[2] * weight;
                depth.data[idx] += s.depth * weight;
                alpha.data[idx] += weight;
                trans[idx] = t * (1.0 - a);
                if record {
                    tape[idx].push(Term {
                        splat: si as u32,
                        alpha: a,
                        trans: t,
                        clamped,
                    });
                }
            }
        }
    }
    RenderOutput {
        color,
        depth,
        alpha,
    }
}

/// Render the map from a camera pose (world-to-camera).
pub fn render(
    map: &GaussianMap,
    world_to_camera: &Pose,
    camera: &CameraIntrinsics,
) -> RenderOutput {
    let splats = project_splats(map, world_to_camera, camera);
    let mut tape = Vec::new();
    composite(&splats, camera, false, &mut tape)
}

/// Render and backpropagate the adjoint images into per-primitive gradients
/// (world-frame mean and covariance, opacity, color). Exact reverse-mode
/// differentiation of the compositing formulas; alpha values at the 0.99
/// clamp contribute zero gradient.
pub fn render_with_grads(
    map: &GaussianMap,
    world_to_camera: &Pose,
    camera: &CameraIntrinsics,
    adjoints: &RenderAdjoints,
) -> (RenderOutput, RenderGradients) {
    let (w, h) = (camera.width as usize, camera.height as usize);
    assert_eq!(
        (adjoints.color.width, adjoints.color.height),
        (w, h),
        "adjoint shape mismatch"
    );
    let splats = project_splats(map, world_to_camera, camera);
    let mut tape = Vec::new();
    let out = composite(&splats, camera, true, &mut tape);
    let mut grads = RenderGradients::zeros(map.slot_count());

    // Screen-space accumulators per splat, folded into world space after.
    let n = splats.len();
    let mut d_mean2d = vec![[0.0f64; 2]; n];
    let mut d_cov2d = vec![[[0.0f64; 2]; 2]; n];
    let mut d_depth = vec![0.0f64; n];
    let mut d_opacity = vec![0.0f64; n];
    let mut d_color = vec![[0.0f64; 3]; n];

    for idx in 0..w * h {
        let terms = &tape[idx];
        if terms.is_empty() {
            continue;
        }
        let (px, py) = ((idx % w) as f64, (idx / w) as f64);
        let cbar = adjoints.color.data[idx];
        let dbar = adjoints.depth.data[idx];
        let abar = adjoints.alpha.data[idx];
        // s_k = d(loss)/d(alpha_k T_k): the term's compositing coefficient.
        // Sweep back-to-front keeping sum_{k>i} s_k alpha_k T_k.
        let mut suffix = 0.0;
        for term in terms.iter().rev() {
            let s = &splats[term.splat as usize];
            let sk = cbar[0] * s.color[0] + cbar[1] * s.color[1] + cbar[2] * s.color[2]
                + dbar * s.depth
                + abar;
            let weight = term.alpha * term.trans;
            for c in 0..3 {
                d_color[term.splat as usize][c] += cbar[c] * weight;
            }
            d_depth[term.splat as usize] += dbar * weight;
            let d_alpha = sk * term.trans - suffix / (1.0 - term.alpha);
            suffix += sk * weight;
            if term.clamped {
                continue;
            }
            // alpha = opacity * exp(-q/2), q = d^T conic d.
            let g = term.alpha / s.opacity;
            d_opacity[term.splat as usize] += d_alpha * g;
            let d_q = -0.5 * term.alpha * d_alpha;
            let d = [px - s.mean2d[0], py - s.mean2d[1]];
            let pd = [
                s.conic[0][0] * d[0] + s.conic[0][1] * d[1],
                s.conic[1][0] * d[0] + s.conic[1][1] * d[1],
            ];
            // dq/d(mean2d) = -2 conic d; dq/d(conic) = d d^T;
            // d(conic)/d(cov2d) folds to -conic (d d^T) conic.
            d_mean2d[term.splat as usize][0] -= 2.0 * d_q * pd[0];
            d_mean2d[term.splat as usize][1] -= 2.0 * d_q * pd[1];
            for a in 0..2 {
                for b in 0..2 {
                    d_cov2d[term.splat as usize][a][b] -= d_q * pd[a] * pd[b];
                }
            }
        }
    }

    // Fold screen-space gradients back to world-frame primitive parameters.
    let w_rot = &world_to_camera.rotation;
    let w_rot_t = mat3_transpose(w_rot);
    for (si, s) in splats.iter().enumerate() {
        let prim_id = s.id as usize;
        grads.d_color[prim_id] = [
            grads.d_color[prim_id][0] + d_color[si][0],
            grads.d_color[prim_id][1] + d_color[si][1],
            grads.d_color[prim_id][2] + d_color[si][2],
        ];
        grads.d_opacity[prim_id] += d_opacity[si];

        let j = perspective_jacobian(camera, s.p_cam);
        // Mean: through projection and through the depth channel.
        let mut d_pcam = [
            j[0][0] * d_mean2d[si][0] + j[1][0] * d_mean2d[si][1],
            j[0][1] * d_mean2d[si][0] + j[1][1] * d_mean2d[si][1],
            j[0][2] * d_mean2d[si][0] + j[1][2] * d_mean2d[si][1],
        ];
        d_pcam[2] += d_depth[si];

        // cov2d = J M J^T with M = W Sigma W^T: adjoint into M, and into the
        // mean through J's dependence on the camera-frame point.
        // J-bar = 2 cov2d-bar J M (cov2d-bar and M are symmetric).
        let m = mat3_mul(w_rot, &mat3_mul(&map.get(s.id).cov, &w_rot_t));
        let mut jm = [[0.0f64; 3]; 2];
        for a in 0..2 {
            for i in 0..3 {
                for kk in 0..3 {
                    jm[a][i] += j[a][kk] * m[kk][i];
                }
            }
        }
        let mut jbar = [[0.0f64; 3]; 2];
        for a in 0..2 {
            for i in 0..3 {
                for b in 0..2 {
                    jbar[a][i] += 2.0 * d_cov2d[si][a][b] * jm[b][i];
                }
            }
        }
        // dJ/d(p_cam) is sparse; accumulate p-bar entries directly.
        let (fx, fy) = (camera.fx, camera.fy);
        let (x, y, z) = (s.p_cam[0], s.p_cam[1], s.p_cam[2]);
        let z2 = z * z;
        d_pcam[0] += jbar[0][2] * (-fx / z2);
        d_pcam[1] += jbar[1][2] * (-fy / z2);
        d_pcam[2] += jbar[0][0] * (-fx / z2)
            + jbar[0][2] * (2.0 * fx * x / (z2 * z))
            + jbar[1][1] * (-fy / z2)
            + jbar[1][2] * (2.0 * fy * y / (z2 * z));

        let d_mean_world = mat3_vec(&w_rot_t, d_pcam);
        for a in 0..3 {
            grads.d_mean[prim_id][a] += d_mean_world[a];
        }

        // M-bar = J^T cov2d-bar J; Sigma-bar = W^T M-bar W.
        let mut mbar = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += j[a][i] * d_cov2d[si][a][b] * j[b][k];
                    }
                }
                mbar[i][k] = acc;
            }
        }
        let sigma_bar = mat3_mul(&w_rot_t, &mat3_mul(&mbar, w_rot));
        for a in 0..3 {
            for b in 0..3 {
                grads.d_cov[prim_id][a][b] += 0.5 * (sigma_bar[a][b] + sigma_bar[b][a]);
            }
        }
    }

    (out, grads)
}
