//! Trajectory and rendering quality metrics: rigid (no-scale) alignment,
//! absolute trajectory RMSE, rotational drift per 100 m, PSNR, and SSIM.

use crate::error::{Error, Result};
use crate::geometry::{
    add3, mat3_det, mat3_mul, mat3_transpose, mat3_vec, norm3, rotation_angle, scale3, sub3,
    Mat3, Pose, Vec3,
};
use crate::image::ColorImage;
use crate::mask::PixelMask;

/// Stamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    samples: Vec<(f64, Pose)>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        TrajectoryRecord::default()
    }

    /// Appends a pose; the stored pose stamp is overwritten by `stamp`.
    pub fn push(&mut self, stamp: f64, mut pose: Pose) -> Result<()> {
        if let Some(&(last, _)) = self.samples.last() {
            if stamp <= last {
                return Err(Error::data(format!(
                    "trajectory timestamps must strictly increase: {stamp} after {last}"
                )));
            }
        }
        pose.stamp = stamp;
        self.samples.push((stamp, pose));
        Ok(())
    }

    pub fn from_samples(samples: Vec<(f64, Pose)>) -> Result<Self> {
        let mut record = TrajectoryRecord::new();
        for (stamp, pose) in samples {
            record.push(stamp, pose)?;
        }
        Ok(record)
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Least-squares rigid transform (rotation + translation, no scale) mapping
/// `src` points onto `dst`: minimizes sum ||dst_i - (R src_i + t)||^2.
pub fn umeyama_alignment(src: &[Vec3], dst: &[Vec3]) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(Error::data("alignment point counts differ"));
    }
    if src.is_empty() {
        return Err(Error::data("alignment needs at least one point pair"));
    }
    let n = src.len() as f64;
    let mut mu_s = [0.0; 3];
    let mut mu_d = [0.0; 3];
    for (s, d) in src.iter().zip(dst) {
        mu_s = add3(mu_s, *s);
        mu_d = add3(mu_d, *d);
    }
    mu_s = scale3(mu_s, 1.0 / n);
    mu_d = scale3(mu_d, 1.0 / n);
    let mut cross: Mat3 = [[0.0; 3]; 3];
    for (s, d) in src.iter().zip(dst) {
        let sc = sub3(*s, mu_s);
        let dc = sub3(*d, mu_d);
        for r in 0..3 {
            for c in 0..3 {
                cross[r][c] += dc[r] * sc[c];
            }
        }
    }
    let (u, _, v) = crate::geometry::svd3(&cross);
    // Proper rotation: flip the weakest direction when det(U V^T) < 0.
    let mut d = [1.0, 1.0, 1.0];
    if mat3_det(&mat3_mul(&u, &mat3_transpose(&v))) < 0.0 {
        d[2] = -1.0;
    }
    let mut rotation = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += u[r][k] * d[k] * v[c][k];
            }
            rotation[r][c] = acc;
        }
    }
    let translation = sub3(mu_d, mat3_vec(&rotation, mu_s));
    Ok(Pose::new(rotation, translation, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMetrics {
    pub ate_rmse: f64,
    pub rot_drift_deg_per_100m: f64,
}

/// Timestamp association window for matching estimated to reference poses.
pub const ASSOCIATION_TOLERANCE: f64 = 0.010;

/// Length of the sub-trajectories over which rotational drift is measured.
const DRIFT_SEGMENT_LENGTH: f64 = 100.0;

fn associate(est: &TrajectoryRecord, gt: &TrajectoryRecord) -> Vec<(usize, usize)> {
    let gts = gt.samples();
    let mut pairs = Vec::new();
    for (i, &(t, _)) in est.samples().iter().enumerate() {
        if gts.is_empty() {
            break;
        }
        let after = gts.partition_point(|&(gt_t, _)| gt_t < t);
        let mut best: Option<usize> = None;
        for cand in [after.wrapping_sub(1), after] {
            if cand >= gts.len() {
                continue;
            }
            if best.map_or(true, |b| {
                (gts[cand].0 - t).abs() < (gts[b].0 - t).abs()
            }) {
                best = Some(cand);
            }
        }
        if let Some(j) = best {
            if (gts[j].0 - t).abs() <= ASSOCIATION_TOLERANCE {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Absolute trajectory RMSE after rigid alignment, plus rotational drift in
/// degrees per 100 m from relative-pose errors over 100 m sub-trajectories
/// (sequences shorter than 100 m: one error over the full length, scaled).
pub fn eval_trajectory(
    est: &TrajectoryRecord,
    gt: &TrajectoryRecord,
) -> Result<TrajectoryMetrics> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(Error::data(format!(
            "need at least two overlapping timestamps, found {}",
            pairs.len()
        )));
    }
    let est_pts: Vec<Vec3> = pairs
        .iter()
        .map(|&(i, _)| est.samples()[i].1.translation)
        .collect();
    let gt_pts: Vec<Vec3> = pairs
        .iter()
        .map(|&(_, j)| gt.samples()[j].1.translation)
        .collect();
    let align = umeyama_alignment(&est_pts, &gt_pts)?;
    let mut sq_sum = 0.0;
    for (e, g) in est_pts.iter().zip(&gt_pts) {
        let r = sub3(align.transform_point(*e), *g);
        sq_sum += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    }
    let ate_rmse = (sq_sum / pairs.len() as f64).sqrt();

    // Relative rotations are invariant to the global alignment, so drift is
    // computed directly on the raw rotation sequences.
    let mut cumlen = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    cumlen.push(0.0);
    for w in gt_pts.windows(2) {
        acc += norm3(sub3(w[1], w[0]));
        cumlen.push(acc);
    }
    let total = acc;
    let rel_angle_deg = |a: usize, b: usize| -> f64 {
        let (ei, gi) = pairs[a];
        let (ej, gj) = pairs[b];
        let rel = |r0: &Mat3, r1: &Mat3| mat3_mul(&mat3_transpose(r0), r1);
        let rel_est = rel(&est.samples()[ei].1.rotation, &est.samples()[ej].1.rotation);
        let rel_gt = rel(&gt.samples()[gi].1.rotation, &gt.samples()[gj].1.rotation);
        let err = mat3_mul(&mat3_transpose(&rel_gt), &rel_est);
        rotation_angle(&err).to_degrees()
    };
    let mut drift_sq_sum = 0.0;
    let mut drift_count = 0usize;
    for start in 0..pairs.len() {
        if total - cumlen[start] < DRIFT_SEGMENT_LENGTH - 1e-9 {
            break;
        }
        let target = cumlen[start] + DRIFT_SEGMENT_LENGTH - 1e-9;
        let end = cumlen.partition_point(|&l| l < target);
        let seg = cumlen[end] - cumlen[start];
        let d = rel_angle_deg(start, end) * DRIFT_SEGMENT_LENGTH / seg;
        drift_sq_sum += d * d;
        drift_count += 1;
    }
    let rot_drift_deg_per_100m = if drift_count > 0 {
        (drift_sq_sum / drift_count as f64).sqrt()
    } else if total > 1e-9 {
        rel_angle_deg(0, pairs.len() - 1) * DRIFT_SEGMENT_LENGTH / total
    } else {
        0.0
    };
    Ok(TrajectoryMetrics {
        ate_rmse,
        rot_drift_deg_per_100m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// PSNR ceiling reported for exact matches (MSE = 0).
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1 L)^2, K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2 L)^2, K2 = 0.03, L = 1

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn ssim_value(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov: f64) -> f64 {
    ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2))
}

/// Mean SSIM over window centers where the full 11x11 window fits and the
/// center pixel is unmasked; channels are averaged. Images smaller than the
/// window fall back to one global (unmasked-pixel) window.
fn ssim_image(a: &ColorImage, b: &ColorImage, mask: Option<&PixelMask>) -> (f64, usize) {
    let (w, h) = (a.width, a.height);
    let masked = |x: usize, y: usize| mask.is_some_and(|m| m.is_set(x, y));
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let mut value = 0.0;
        for ch in 0..3 {
            let mut sums = [0.0f64; 5];
            let mut count = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if masked(x, y) {
                        continue;
                    }
                    let (pa, pb) = (a.get(x, y)[ch], b.get(x, y)[ch]);
                    sums[0] += pa;
                    sums[1] += pb;
                    sums[2] += pa * pa;
                    sums[3] += pb * pb;
                    sums[4] += pa * pb;
                    count += 1.0;
                }
            }
            if count == 0.0 {
                return (0.0, 0);
            }
            let (mx, my) = (sums[0] / count, sums[1] / count);
            value += ssim_value(
                mx,
                my,
                (sums[2] / count - mx * mx).max(0.0),
                (sums[3] / count - my * my).max(0.0),
                sums[4] / count - mx * my,
            );
        }
        return (value / 3.0, 1);
    }
    let kernel = ssim_kernel();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut centers = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            if masked(cx, cy) {
                continue;
            }
            let mut value = 0.0;
            for ch in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let row = cy + ky - half;
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky] * kernel[kx];
                        let pa = a.get(cx + kx - half, row)[ch];
                        let pb = b.get(cx + kx - half, row)[ch];
                        mx += wgt * pa;
                        my += wgt * pb;
                        sxx += wgt * pa * pa;
                        syy += wgt * pb * pb;
                        sxy += wgt * pa * pb;
                    }
                }
                value += ssim_value(
                    mx,
                    my,
                    (sxx - mx * mx).max(0.0),
                    (syy - my * my).max(0.0),
                    sxy - mx * my,
                );
            }
            total += value / 3.0;
            centers += 1;
        }
    }
    (total, centers)
}

/// PSNR (dB, capped at 99) and mean SSIM over image pairs. Masked pixels are
/// excluded from the mean-square error and from SSIM window centers.
pub fn eval_render(
    rendered: &[ColorImage],
    reference: &[ColorImage],
    masks: Option<&[PixelMask]>,
) -> Result<RenderMetrics> {
    if rendered.len() != reference.len() {
        return Err(Error::data("rendered and reference image counts differ"));
    }
    if rendered.is_empty() {
        return Err(Error::data("no image pairs to evaluate"));
    }
    if let Some(masks) = masks {
        if masks.len() != rendered.len() {
            return Err(Error::data("mask count differs from image count"));
        }
    }
    let mut sq_sum = 0.0;
    let mut sq_count = 0.0;
    let mut ssim_sum = 0.0;
    let mut ssim_centers = 0usize;
    for (idx, (r, g)) in rendered.iter().zip(reference).enumerate() {
        if r.width != g.width || r.height != g.height {
            return Err(Error::data(format!(
                "image pair {idx} shape mismatch: {}x{} vs {}x{}",
                r.width, r.height, g.width, g.height
            )));
        }
        let mask = masks.map(|m| &m[idx]);
        if let Some(m) = mask {
            if m.width != r.width || m.height != r.height {
                return Err(Error::data(format!("mask {idx} shape mismatch")));
            }
        }
        for y in 0..r.height {
            for x in 0..r.width {
                if mask.is_some_and(|m| m.is_set(x, y)) {
                    continue;
                }
                let (pr, pg) = (r.get(x, y), g.get(x, y));
                for ch in 0..3 {
                    let d = pr[ch] - pg[ch];
                    sq_sum += d * d;
                }
                sq_count += 3.0;
            }
        }
        let (s, n) = ssim_image(r, g, mask);
        ssim_sum += s;
        ssim_centers += n;
    }
    if sq_count == 0.0 || ssim_centers == 0 {
        return Err(Error::data("every pixel is masked"));
    }
    let mse = sq_sum / sq_count;
    let psnr_db = if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    };
    Ok(RenderMetrics {
        psnr_db,
        ssim: ssim_sum / ssim_centers as f64,
    })
}
