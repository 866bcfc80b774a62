//! Ego-velocity from a single radar frame's Doppler channel.
//!
//! Each detection constrains the sensor-frame platform velocity v through
//! doppler_i = ray_i^T v. A consensus-seeded alternation between least
//! squares and residual thresholding separates static detections (inliers)
//! from dynamic ones: a detection is dynamic when |doppler - ray^T v| is
//! strictly greater than the threshold.

use crate::error::{Error, Result};
use crate::geometry::{dot3, mat3_add, mat3_inv, mat3_vec, outer3, scale3, sym_eig, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// One radar detection in sensor spherical coordinates.
/// `dynamic` is a label slot: the simulator writes ground truth into it and
/// the pipeline overwrites it with the classifier's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    /// Azimuth, radians.
    pub theta_y: f64,
    /// Elevation, radians; |theta_p| <= pi/2.
    pub theta_p: f64,
    /// Range, meters, >= 0.
    pub range: f64,
    /// Radial velocity measurement, m/s.
    pub doppler: f64,
    /// Reflected power, dBsm; carried through untouched.
    pub power: f64,
    pub dynamic: Option<bool>,
}

impl RadarDetection {
    pub fn ray(&self) -> Vec3 {
        spherical_ray(self.theta_y, self.theta_p)
    }

    /// Sensor-frame Cartesian position: range * ray.
    pub fn cartesian(&self) -> Vec3 {
        scale3(self.ray(), self.range)
    }
}

/// Unit ray from azimuth/elevation.
pub fn spherical_ray(theta_y: f64, theta_p: f64) -> Vec3 {
    [
        theta_y.cos() * theta_p.cos(),
        theta_y.sin() * theta_p.cos(),
        theta_p.sin(),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoVelocityEstimate {
    /// Estimated sensor-frame platform velocity, m/s.
    pub v_hat: Vec3,
    /// True where the detection is consistent with v_hat (static).
    pub inlier_flags: Vec<bool>,
    /// doppler_i - ray_i^T v_hat for every detection.
    pub residuals: Vec<f64>,
    /// False when the inlier rays do not span rank 3.
    pub condition_ok: bool,
}

/// Least squares over the flagged subset. Returns (v, condition_ok);
/// rank-deficient geometry falls back to the pseudo-inverse over the
/// well-conditioned subspace.
fn lsq_subset(dets: &[RadarDetection], keep: &[bool]) -> (Vec3, bool) {
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (d, &k) in dets.iter().zip(keep) {
        if !k {
            continue;
        }
        let r = d.ray();
        ata = mat3_add(&ata, &outer3(r, r));
        for i in 0..3 {
            atb[i] += r[i] * d.doppler;
        }
    }
    // Singular values of the design matrix are sqrt of eig(X^T X).
    let (lam, vecs) = sym_eig(&ata);
    let ok = lam[2].max(0.0).sqrt() > 1e-6;
    let mut v = [0.0; 3];
    for i in 0..3 {
        let s2 = lam[i].max(0.0);
        if s2.sqrt() > 1e-6 {
            let coeff = dot3(vecs[i], atb) / s2;
            v = [
                v[0] + coeff * vecs[i][0],
                v[1] + coeff * vecs[i][1],
                v[2] + coeff * vecs[i][2],
            ];
        }
    }
    (v, ok)
}

fn count_within(dets: &[RadarDetection], v: Vec3, delta_v: f64) -> usize {
    dets.iter()
        .filter(|d| (d.doppler - dot3(d.ray(), v)).abs() <= delta_v)
        .count()
}

/// Estimate ego velocity and split detections into static inliers and
/// dynamic outliers.
///
/// The inlier set is seeded by a 100-trial 3-point consensus search (seeded
/// RNG, so the result is a pure function of the input), then iterated to the
/// fixed point of {least squares on inliers -> re-threshold residuals at
/// delta_v}, capped at `max_iters` rounds. A detection is dynamic exactly
/// when its final residual magnitude strictly exceeds `delta_v`.
pub fn solve_ego_velocity(
    detections: &[RadarDetection],
    delta_v: f64,
    max_iters: usize,
) -> Result<EgoVelocityEstimate> {
    let n = detections.len();
    if n < 3 {
        return Err(Error::Underdetermined { needed: 3, got: n });
    }

    // Consensus seed: exact 3-point solves, keep the hypothesis with the
    // most detections within delta_v. The all-detections solve competes too,
    // which covers outlier-free frames even when sampling is unlucky.
    let all = vec![true; n];
    let (mut best_v, _) = lsq_subset(detections, &all);
    let mut best_count = count_within(detections, best_v, delta_v);
    let mut rng = ChaCha12Rng::seed_from_u64(0x0dd5_eed5);
    for _ in 0..100 {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let x = [
            detections[i].ray(),
            detections[j].ray(),
            detections[k].ray(),
        ];
        let y = [
            detections[i].doppler,
            detections[j].doppler,
            detections[k].doppler,
        ];
        let m = [x[0], x[1], x[2]];
        let Ok(minv) = mat3_inv(&m) else { continue };
        let v = mat3_vec(&minv, y);
        let c = count_within(detections, v, delta_v);
        if c > best_count {
            best_count = c;
            best_v = v;
        }
    }

    // Alternate LSQ / reclassification to a fixed point.
    let mut inliers: Vec<bool> = detections
        .iter()
        .map(|d| (d.doppler - dot3(d.ray(), best_v)).abs() <= delta_v)
        .collect();
    let mut v_hat = best_v;
    let mut condition_ok = true;
    for _ in 0..max_iters.max(1) {
        if inliers.iter().filter(|&&b| b).count() < 3 {
            // Too few consistent detections to re-solve; keep current state.
            break;
        }
        let (v, ok) = lsq_subset(detections, &inliers);
        v_hat = v;
        condition_ok = ok;
        let next: Vec<bool> = detections
            .iter()
            .map(|d| (d.doppler - dot3(d.ray(), v)).abs() <= delta_v)
            .collect();
        if next == inliers {
            break;
        }
        inliers = next;
    }

    let residuals: Vec<f64> = detections
        .iter()
        .map(|d| d.doppler - dot3(d.ray(), v_hat))
        .collect();
    let inlier_flags: Vec<bool> = residuals.iter().map(|r| r.abs() <= delta_v).collect();
    Ok(EgoVelocityEstimate {
        v_hat,
        inlier_flags,
        residuals,
        condition_ok,
    })
}

/// Pointwise dynamic classification given an ego-velocity estimate:
/// dynamic iff |doppler - ray^T v_hat| > delta_v (strict).
pub fn classify_detections(
    detections: &[RadarDetection],
    v_hat: Vec3,
    delta_v: f64,
) -> Vec<bool> {
    detections
        .iter()
        .map(|d| (d.doppler - dot3(d.ray(), v_hat)).abs() > delta_v)
        .collect()
}
