//! Global Gaussian-primitive map indexed by a multi-level voxel grid.
//!
//! Levels follow an exact halving/doubling schedule (voxel size delta halves,
//! gradient threshold epsilon doubles). New radar observations either fuse
//! into an existing primitive (Bayesian product of the primitive prior, an
//! isotropic range-uncertainty Gaussian along the beam, and the point's own
//! covariance) or create a fresh primitive. Gradient-driven densification
//! splits a primitive by sampling a child mean from the parent's
//! distribution, constrained to the parent's cell.

use crate::error::{Error, Result};
use crate::geometry::{
    add3, dot3, mat3_add, mat3_inv, mat3_scale, mat3_vec, outer3, scale3, sub3, sym_eig, Mat3,
    Vec3, IDENTITY3,
};
#[cfg(test)]
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

pub const COV_EIG_MIN: f64 = 1e-8;
pub const COV_EIG_MAX: f64 = 100.0;
pub const PRUNE_OPACITY: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    /// PSD, eigenvalues clamped to [1e-8, 100] m^2.
    pub cov: Mat3,
    /// In (0, 1]; primitives below the prune threshold are removed.
    pub opacity: f64,
    /// RGB in [0,1]^3.
    pub color: [f64; 3],
    pub level: u32,
    /// Running mean of the rendering-loss gradient norm w.r.t. the mean,
    /// since the last densify pass.
    pub accum_grad: f64,
    pub grad_count: u32,
    pub obs_count: u32,
}

/// Voxel sizes and densify thresholds per level:
/// delta_{l+1} = delta_l / 2 and epsilon_{l+1} = 2 epsilon_l, exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSchedule {
    pub levels: Vec<(f64, f64)>,
}

pub fn init_schedule(delta_0: f64, epsilon_0: f64, num_levels: usize) -> Result<LevelSchedule> {
    if !(delta_0 > 0.0) {
        return Err(Error::config("delta_0", "voxel size must be positive"));
    }
    if num_levels < 1 {
        return Err(Error::config("num_levels", "need at least one level"));
    }
    let mut levels = Vec::with_capacity(num_levels);
    let (mut d, mut e) = (delta_0, epsilon_0);
    for _ in 0..num_levels {
        levels.push((d, e));
        d *= 0.5;
        e *= 2.0;
    }
    Ok(LevelSchedule { levels })
}

impl LevelSchedule {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn delta(&self, level: u32) -> f64 {
        self.levels[level as usize].0
    }

    pub fn epsilon(&self, level: u32) -> f64 {
        self.levels[level as usize].1
    }

    /// Level for a primitive of mean radius r: the finest (smallest-voxel)
    /// level whose voxel still covers the diameter, i.e. the largest l with
    /// delta_l >= 2r; oversized primitives land at level 0.
    pub fn level_for_radius(&self, r: f64) -> u32 {
        for l in (0..self.levels.len()).rev() {
            if self.levels[l].0 >= 2.0 * r {
                return l as u32;
            }
        }
        0
    }
}

/// Mean radius: average standard deviation over the covariance's principal
/// axes.
pub fn mean_radius(cov: &Mat3) -> f64 {
    let (lam, _) = sym_eig(cov);
    (lam[0].max(0.0).sqrt() + lam[1].max(0.0).sqrt() + lam[2].max(0.0).sqrt()) / 3.0
}

/// Clamp covariance eigenvalues into [COV_EIG_MIN, COV_EIG_MAX].
pub fn clamp_cov(cov: &Mat3) -> Mat3 {
    let (lam, v) = sym_eig(cov);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        let l = lam[i].clamp(COV_EIG_MIN, COV_EIG_MAX);
        out = mat3_add(&out, &mat3_scale(&outer3(v[i], v[i]), l));
    }
    out
}

/// Bayesian fusion of a primitive (mu, sigma) with a range observation
/// (d * e_r, sigma_eps^2 I) and a point observation (p, cov_p):
/// posterior precision is the sum of the three precisions, posterior mean
/// the precision-weighted combination. Returns (mu', sigma', regularized):
/// a numerically singular precision sum is regularized with 1e-10 I and
/// flagged.
pub fn fuse_gaussian(
    mu: Vec3,
    sigma: &Mat3,
    sigma_eps: f64,
    d_e_r: Vec3,
    p: Vec3,
    cov_p: &Mat3,
) -> (Vec3, Mat3, bool) {
    let mut regularized = false;
    let mut inv_or_reg = |m: &Mat3| match mat3_inv(m) {
        Ok(inv) => inv,
        Err(_) => {
            regularized = true;
            mat3_inv(&mat3_add(m, &mat3_scale(&IDENTITY3, 1e-10))).unwrap_or(IDENTITY3)
        }
    };
    let prec_sigma = inv_or_reg(sigma);
    let prec_p = inv_or_reg(cov_p);
    let w_eps = 1.0 / (sigma_eps * sigma_eps);
    let mut prec_sum = mat3_add(&prec_sigma, &prec_p);
    for i in 0..3 {
        prec_sum[i][i] += w_eps;
    }
    let sigma_new = match mat3_inv(&prec_sum) {
        Ok(inv) => inv,
        Err(_) => {
            regularized = true;
            mat3_inv(&mat3_add(&prec_sum, &mat3_scale(&IDENTITY3, 1e-10))).unwrap_or(IDENTITY3)
        }
    };
    let rhs = add3(
        add3(mat3_vec(&prec_sigma, mu), scale3(d_e_r, w_eps)),
        mat3_vec(&prec_p, p),
    );
    let mu_new = mat3_vec(&sigma_new, rhs);
    (mu_new, sigma_new, regularized)
}

type CellKey = (i64, i64, i64);

#[derive(Debug, Clone, Default)]
struct LevelIndex {
    cells: HashMap<CellKey, Vec<u32>>,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct GaussianMap {
    pub schedule: LevelSchedule,
    /// Range-uncertainty standard deviation used for fusion, meters.
    pub sigma_eps: f64,
    primitives: Vec<GaussianPrimitive>,
    alive: Vec<bool>,
    levels: Vec<LevelIndex>,
    pub regularized_merges: u64,
}

fn cell_of(p: Vec3, delta: f64) -> CellKey {
    (
        (p[0] / delta).floor() as i64,
        (p[1] / delta).floor() as i64,
        (p[2] / delta).floor() as i64,
    )
}

impl GaussianMap {
    pub fn new(schedule: LevelSchedule, sigma_eps: f64) -> Self {
        let n_levels = schedule.len();
        GaussianMap {
            schedule,
            sigma_eps,
            primitives: Vec::new(),
            alive: Vec::new(),
            levels: vec![LevelIndex::default(); n_levels],
            regularized_merges: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Total id slots ever allocated, including pruned ones. Gradient
    /// buffers indexed by primitive id size themselves with this.
    pub fn slot_count(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: u32) -> &GaussianPrimitive {
        &self.primitives[id as usize]
    }

    pub fn get_mut(&mut self, id: u32) -> &mut GaussianPrimitive {
        &mut self.primitives[id as usize]
    }

    pub fn is_alive(&self, id: u32) -> bool {
        self.alive[id as usize]
    }

    /// Alive primitive ids, ascending.
    pub fn alive_ids(&self) -> Vec<u32> {
        (0..self.primitives.len() as u32)
            .filter(|&id| self.alive[id as usize])
            .collect()
    }

    /// Primitives per level, alive only.
    pub fn level_count(&self, level: u32) -> usize {
        self.levels[level as usize].count
    }

    fn index_insert(&mut self, id: u32) {
        let prim = &self.primitives[id as usize];
        let delta = self.schedule.delta(prim.level);
        let key = cell_of(prim.mean, delta);
        self.levels[prim.level as usize]
            .cells
            .entry(key)
            .or_default()
            .push(id);
        self.levels[prim.level as usize].count += 1;
    }

    fn index_remove(&mut self, id: u32) {
        let prim = &self.primitives[id as usize];
        let delta = self.schedule.delta(prim.level);
        let key = cell_of(prim.mean, delta);
        let level = &mut self.levels[prim.level as usize];
        if let Some(ids) = level.cells.get_mut(&key) {
            ids.retain(|&x| x != id);
            if ids.is_empty() {
                level.cells.remove(&key);
            }
        }
        level.count -= 1;
    }

    /// Insert a fully-formed primitive (covariance clamped here); returns its id.
    pub fn insert_primitive(&mut self, mut prim: GaussianPrimitive) -> u32 {
        prim.cov = clamp_cov(&prim.cov);
        prim.level = prim
            .level
            .min(self.schedule.len() as u32 - 1);
        let id = self.primitives.len() as u32;
        self.primitives.push(prim);
        self.alive.push(true);
        self.index_insert(id);
        id
    }

    fn remove(&mut self, id: u32) {
        if self.alive[id as usize] {
            self.index_remove(id);
            self.alive[id as usize] = false;
        }
    }

    /// Merge candidate for `point`: the primitive sharing the point's cell at
    /// the primitive's own level, within Mahalanobis 3. The gate covariance
    /// is floored at (delta_l/6)^2 so heavily-fused (tight) primitives keep
    /// accepting revisits of the same cell; ties resolve to the smallest
    /// Mahalanobis distance, then the lowest id.
    fn merge_candidate(&self, point: Vec3) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for (l, level) in self.levels.iter().enumerate() {
            let delta = self.schedule.delta(l as u32);
            let Some(ids) = level.cells.get(&cell_of(point, delta)) else {
                continue;
            };
            let floor = (delta / 6.0) * (delta / 6.0);
            for &id in ids {
                let prim = &self.primitives[id as usize];
                let mut gate = prim.cov;
                for i in 0..3 {
                    gate[i][i] += floor;
                }
                let Ok(inv) = mat3_inv(&gate) else { continue };
                let d = sub3(point, prim.mean);
                let m2 = dot3(d, mat3_vec(&inv, d));
                if m2 <= 9.0 && best.map_or(true, |(bm, bid)| m2 < bm || (m2 == bm && id < bid)) {
                    best = Some((m2, id));
                }
            }
        }
        best.map(|(_, id)| id)
    }

    /// Fuse a radar-enhanced point into the map or create a new primitive.
    /// `d` and `e_r` describe the radar beam observation (range and unit
    /// direction) whose product d*e_r is the observed position with
    /// isotropic uncertainty sigma_eps; `cov_p` is the point's own
    /// covariance. Returns the id of the updated or created primitive.
    pub fn insert_or_merge(
        &mut self,
        point: Vec3,
        d: f64,
        e_r: Vec3,
        cov_p: &Mat3,
        color: [f64; 3],
    ) -> u32 {
        if let Some(id) = self.merge_candidate(point) {
            let prim = self.primitives[id as usize].clone();
            let (mu, sigma, reg) = fuse_gaussian(
                prim.mean,
                &prim.cov,
                self.sigma_eps,
                scale3(e_r, d),
                point,
                cov_p,
            );
            if reg {
                self.regularized_merges += 1;
            }
            self.index_remove(id);
            {
                let n = prim.obs_count as f64;
                let p = &mut self.primitives[id as usize];
                p.mean = mu;
                p.cov = clamp_cov(&sigma);
                p.color = [
                    (prim.color[0] * n + color[0]) / (n + 1.0),
                    (prim.color[1] * n + color[1]) / (n + 1.0),
                    (prim.color[2] * n + color[2]) / (n + 1.0),
                ];
                p.obs_count += 1;
                p.level = self.schedule.level_for_radius(mean_radius(&p.cov));
            }
            self.index_insert(id);
            id
        } else {
            let w_eps = 1.0 / (self.sigma_eps * self.sigma_eps);
            let mut prec = match mat3_inv(cov_p) {
                Ok(inv) => inv,
                Err(_) => {
                    self.regularized_merges += 1;
                    mat3_inv(&mat3_add(cov_p, &mat3_scale(&IDENTITY3, 1e-10)))
                        .unwrap_or(IDENTITY3)
                }
            };
            for i in 0..3 {
                prec[i][i] += w_eps;
            }
            let cov = match mat3_inv(&prec) {
                Ok(inv) => inv,
                Err(_) => {
                    self.regularized_merges += 1;
                    IDENTITY3
                }
            };
            let cov = clamp_cov(&cov);
            let level = self.schedule.level_for_radius(mean_radius(&cov));
            self.insert_primitive(GaussianPrimitive {
                mean: point,
                cov,
                opacity: 0.9,
                color,
                level,
                accum_grad: 0.0,
                grad_count: 0,
                obs_count: 1,
            })
        }
    }

    /// Exact nearest alive primitive center to `query` over all levels.
    /// Per-level ring search over the voxel hash; sparse levels fall back to
    /// a linear scan. Distance ties resolve to the lowest id.
    pub fn nearest_gaussian(&self, query: Vec3) -> Result<(u32, f64)> {
        let mut best: Option<(f64, u32)> = None;
        let consider = |best: &mut Option<(f64, u32)>, id: u32, prim: &GaussianPrimitive| {
            let d2 = {
                let d = sub3(query, prim.mean);
                dot3(d, d)
            };
            if best.map_or(true, |(bd, bid)| d2 < bd || (d2 == bd && id < bid)) {
                *best = Some((d2, id));
            }
        };
        for (l, level) in self.levels.iter().enumerate() {
            if level.count == 0 {
                continue;
            }
            if level.count <= 64 {
                for ids in level.cells.values() {
                    for &id in ids {
                        consider(&mut best, id, &self.primitives[id as usize]);
                    }
                }
                continue;
            }
            let delta = self.schedule.delta(l as u32);
            let (cx, cy, cz) = cell_of(query, delta);
            let mut ring: i64 = 0;
            loop {
                // Cells closer than (ring-1)*delta cannot exist beyond this
                // ring; stop once the current best beats that bound.
                if let Some((bd2, _)) = best {
                    let lower = (ring - 1).max(0) as f64 * delta;
                    if lower * lower > bd2 {
                        break;
                    }
                }
                // A query far from all content would expand rings cubically
                // before touching an occupied cell; a linear scan of the
                // level is exact and cheaper from here on.
                if ring > 4 {
                    for ids in level.cells.values() {
                        for &id in ids {
                            consider(&mut best, id, &self.primitives[id as usize]);
                        }
                    }
                    break;
                }
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(ids) =
                                level.cells.get(&(cx + dx, cy + dy, cz + dz))
                            {
                                for &id in ids {
                                    consider(&mut best, id, &self.primitives[id as usize]);
                                }
                            }
                        }
                    }
                }
                ring += 1;
            }
        }
        match best {
            Some((d2, id)) => Ok((id, d2.sqrt())),
            None => Err(Error::EmptyMap),
        }
    }

    /// Split `parent`: sample a child mean from N(snap(parent.mean), parent.cov),
    /// where snap() moves the mean to the center of its child-level cell.
    /// The sample is redrawn while it falls outside the parent's cell at the
    /// parent's level (16 attempts, then clamped into the cell). The child
    /// lands one level deeper (clamped to the schedule) with a quarter of
    /// the parent's covariance, leaving the parent's level population
    /// unchanged.
    pub fn split(&mut self, parent: u32, rng: &mut ChaCha12Rng) -> u32 {
        let prim = self.primitives[parent as usize].clone();
        let child_level = (prim.level + 1).min(self.schedule.len() as u32 - 1);
        let child_delta = self.schedule.delta(child_level);
        // Child-cell center of the cell containing the parent mean.
        let ck = cell_of(prim.mean, child_delta);
        let snap = [
            (ck.0 as f64 + 0.5) * child_delta,
            (ck.1 as f64 + 0.5) * child_delta,
            (ck.2 as f64 + 0.5) * child_delta,
        ];
        // Parent cell bounds at the parent's level.
        let parent_delta = self.schedule.delta(prim.level);
        let pk = cell_of(prim.mean, parent_delta);
        let lo = [
            pk.0 as f64 * parent_delta,
            pk.1 as f64 * parent_delta,
            pk.2 as f64 * parent_delta,
        ];
        let hi = [lo[0] + parent_delta, lo[1] + parent_delta, lo[2] + parent_delta];
        // Sample from N(snap, parent.cov) via the eigen square root.
        let (lam, vecs) = sym_eig(&prim.cov);
        let mut sample = snap;
        for attempt in 0..=16 {
            if attempt == 16 {
                for a in 0..3 {
                    sample[a] = sample[a].clamp(lo[a], hi[a]);
                }
                break;
            }
            let mut x = snap;
            for i in 0..3 {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                x = add3(x, scale3(vecs[i], z * lam[i].max(0.0).sqrt()));
            }
            sample = x;
            if (0..3).all(|a| sample[a] >= lo[a] && sample[a] <= hi[a]) {
                break;
            }
        }
        let child = GaussianPrimitive {
            mean: sample,
            cov: clamp_cov(&mat3_scale(&prim.cov, 0.25)),
            opacity: prim.opacity,
            color: prim.color,
            level: child_level,
            accum_grad: 0.0,
            grad_count: 0,
            obs_count: 1,
        };
        let id = self.primitives.len() as u32;
        self.primitives.push(child);
        self.alive.push(true);
        self.index_insert(id);
        id
    }

    /// Record one gradient-norm sample for the densify running mean.
    pub fn accumulate_gradient(&mut self, id: u32, grad_norm: f64) {
        let p = &mut self.primitives[id as usize];
        let n = p.grad_count as f64;
        p.accum_grad = (p.accum_grad * n + grad_norm) / (n + 1.0);
        p.grad_count += 1;
    }

    /// Split every primitive whose mean gradient exceeds its level's
    /// threshold; resets the gradient window. Returns the number of splits.
    pub fn densify_on_gradient(&mut self, rng: &mut ChaCha12Rng) -> usize {
        let over: Vec<u32> = self
            .alive_ids()
            .into_iter()
            .filter(|&id| {
                let p = &self.primitives[id as usize];
                p.grad_count > 0 && p.accum_grad > self.schedule.epsilon(p.level)
            })
            .collect();
        for &id in &over {
            self.split(id, rng);
            let p = &mut self.primitives[id as usize];
            p.accum_grad = 0.0;
            p.grad_count = 0;
        }
        over.len()
    }

    /// Remove primitives whose opacity fell below the prune threshold.
    pub fn prune(&mut self) -> usize {
        let dead: Vec<u32> = self
            .alive_ids()
            .into_iter()
            .filter(|&id| self.primitives[id as usize].opacity < PRUNE_OPACITY)
            .collect();
        for &id in &dead {
            self.remove(id);
        }
        dead.len()
    }

    /// Re-index a primitive after its mean/cov changed externally (refinement).
    pub fn reindex(&mut self, id: u32) {
        if !self.alive[id as usize] {
            return;
        }
        self.index_remove(id);
        let level = self
            .schedule
            .level_for_radius(mean_radius(&self.primitives[id as usize].cov));
        self.primitives[id as usize].level = level;
        self.index_insert(id);
    }

    /// Binary little-endian PLY: per-vertex mean, covariance upper triangle,
    /// opacity, 8-bit color, level.
    pub fn to_ply(&self) -> Vec<u8> {
        let ids = self.alive_ids();
        let mut out = Vec::new();
        out.extend_from_slice(
            format!(
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
                 property double x\nproperty double y\nproperty double z\n\
                 property double cxx\nproperty double cxy\nproperty double cxz\n\
                 property double cyy\nproperty double cyz\nproperty double czz\n\
                 property double opacity\n\
                 property uchar red\nproperty uchar green\nproperty uchar blue\n\
                 property uchar level\nend_header\n",
                ids.len()
            )
            .as_bytes(),
        );
        for id in ids {
            let p = &self.primitives[id as usize];
            for v in p.mean {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for (i, j) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
                out.extend_from_slice(&p.cov[i][j].to_le_bytes());
            }
            out.extend_from_slice(&p.opacity.to_le_bytes());
            for c in p.color {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(p.level.min(255) as u8);
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn check_index_invariant(&self) {
        let mut indexed = vec![0usize; self.primitives.len()];
        for (l, level) in self.levels.iter().enumerate() {
            for (key, ids) in &level.cells {
                for &id in ids {
                    assert!(self.alive[id as usize]);
                    let prim = &self.primitives[id as usize];
                    assert_eq!(prim.level as usize, l);
                    assert_eq!(cell_of(prim.mean, self.schedule.delta(l as u32)), *key);
                    indexed[id as usize] += 1;
                }
            }
        }
        for (id, &n) in indexed.iter().enumerate() {
            assert_eq!(n, if self.alive[id] { 1 } else { 0 }, "id {id}");
        }
    }
}

use rand_distr::Distribution;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, mat3_mul, mat3_transpose, norm3};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn simple_map() -> GaussianMap {
        GaussianMap::new(init_schedule(1.6, 2e-4, 6).unwrap(), 0.1)
    }

    fn prim_at(mean: Vec3, cov: Mat3) -> GaussianPrimitive {
        GaussianPrimitive {
            mean,
            cov,
            opacity: 0.9,
            color: [0.5; 3],
            level: 0,
            accum_grad: 0.0,
            grad_count: 0,
            obs_count: 1,
        }
    }

    #[test]
    fn schedule_halves_and_doubles_exactly() {
        let s = init_schedule(1.6, 0.0002, 6).unwrap();
        let deltas: Vec<f64> = s.levels.iter().map(|l| l.0).collect();
        assert_eq!(deltas, vec![1.6, 0.8, 0.4, 0.2, 0.1, 0.05]);
        let s3 = init_schedule(1.6, 0.0002, 3).unwrap();
        let eps: Vec<f64> = s3.levels.iter().map(|l| l.1).collect();
        assert_eq!(eps, vec![0.0002, 0.0004, 0.0008]);
        let s1 = init_schedule(1.6, 0.0002, 1).unwrap();
        assert_eq!(s1.levels, vec![(1.6, 0.0002)]);
        assert!(init_schedule(0.0, 1.0, 3).is_err());
        assert!(init_schedule(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn equal_precision_fusion() {
        // Three unit-precision Gaussians agreeing at (3,0,0).
        let (mu, sigma, reg) = fuse_gaussian(
            [3.0, 0.0, 0.0],
            &IDENTITY3,
            1.0,
            [3.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            &IDENTITY3,
        );
        assert!(!reg);
        assert!(norm3(sub3(mu, [3.0, 0.0, 0.0])) < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((sigma[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precision_weighted_mean() {
        let (mu, _, _) = fuse_gaussian(
            [0.0; 3],
            &IDENTITY3,
            1.0,
            [0.3, 0.0, 0.0],
            [0.3, 0.0, 0.0],
            &IDENTITY3,
        );
        assert!(norm3(sub3(mu, [0.2, 0.0, 0.0])) < 1e-12);
    }

    /// Oracle: sequential two-Gaussian products in covariance form
    /// (no precision sums), using product associativity.
    fn product_pair(mu1: Vec3, s1: &Mat3, mu2: Vec3, s2: &Mat3) -> (Vec3, Mat3) {
        let sum = mat3_add(s1, s2);
        let sum_inv = mat3_inv(&sum).unwrap();
        // mu = s2 (s1+s2)^-1 mu1 + s1 (s1+s2)^-1 mu2
        let mu = add3(
            mat3_vec(&mat3_mul(s2, &sum_inv), mu1),
            mat3_vec(&mat3_mul(s1, &sum_inv), mu2),
        );
        // cov = s1 (s1+s2)^-1 s2
        let cov = mat3_mul(&mat3_mul(s1, &sum_inv), s2);
        // Symmetrize rounding noise.
        let cov = mat3_scale(&mat3_add(&cov, &mat3_transpose(&cov)), 0.5);
        (mu, cov)
    }

    fn random_spd(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> Mat3 {
        let w = [
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ];
        let q = exp_so3(w);
        let mut d = [[0.0; 3]; 3];
        for i in 0..3 {
            d[i][i] = rng.random_range(lo..hi);
        }
        mat3_mul(&mat3_mul(&q, &d), &mat3_transpose(&q))
    }

    #[test]
    fn fusion_matches_pairwise_product_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let sigma = random_spd(&mut rng, 0.05, 5.0);
            let cov_p = random_spd(&mut rng, 0.05, 5.0);
            let mu = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let obs = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let p = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let s_eps = rng.random_range(0.2..2.0);
            let (mu_got, sigma_got, reg) = fuse_gaussian(mu, &sigma, s_eps, obs, p, &cov_p);
            assert!(!reg);
            let eps_cov = mat3_scale(&IDENTITY3, s_eps * s_eps);
            let (mu_a, s_a) = product_pair(mu, &sigma, obs, &eps_cov);
            let (mu_want, s_want) = product_pair(mu_a, &s_a, p, &cov_p);
            assert!(norm3(sub3(mu_got, mu_want)) < 1e-10, "mean mismatch");
            for i in 0..3 {
                for j in 0..3 {
                    assert!((sigma_got[i][j] - s_want[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn merge_hit_keeps_count_miss_increments() {
        let mut map = simple_map();
        let id = map.insert_or_merge([1.0, 2.0, 3.0], 3.74, normalize(cow()), &cov_small(), [0.5; 3]);
        assert_eq!(map.len(), 1);
        // Same point again: merge, count unchanged, obs_count bumped.
        let id2 = map.insert_or_merge([1.0, 2.0, 3.0], 3.74, normalize(cow()), &cov_small(), [0.5; 3]);
        assert_eq!(id, id2);
        assert_eq!(map.len(), 1);
        assert_eq!(map.get(id).obs_count, 2);
        // Distant point: new primitive.
        let id3 = map.insert_or_merge([20.0, 2.0, 3.0], 20.3, [1.0, 0.0, 0.0], &cov_small(), [0.5; 3]);
        assert_ne!(id, id3);
        assert_eq!(map.len(), 2);
        map.check_index_invariant();
    }

    fn cow() -> Vec3 {
        [1.0, 2.0, 3.0]
    }

    fn normalize(v: Vec3) -> Vec3 {
        crate::geometry::normalize3(v)
    }

    fn cov_small() -> Mat3 {
        mat3_scale(&IDENTITY3, 0.01)
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut map = simple_map();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut centers = Vec::new();
        for _ in 0..1000 {
            let p = [
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-10.0..10.0),
            ];
            let r: f64 = rng.random_range(0.01..2.0);
            let cov = mat3_scale(&IDENTITY3, r * r);
            centers.push(p);
            map.insert_primitive(prim_at(p, cov));
        }
        map.check_index_invariant();
        for _ in 0..1000 {
            let q = [
                rng.random_range(-35.0..35.0),
                rng.random_range(-35.0..35.0),
                rng.random_range(-12.0..12.0),
            ];
            let (id, dist) = map.nearest_gaussian(q).unwrap();
            // Linear-scan oracle.
            let mut best = (f64::INFINITY, 0u32);
            for (i, c) in centers.iter().enumerate() {
                let d = norm3(sub3(q, *c));
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            assert_eq!(id, best.1);
            assert!((dist - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_on_empty_map_errors() {
        let map = simple_map();
        assert!(matches!(map.nearest_gaussian([0.0; 3]), Err(Error::EmptyMap)));
        let mut map2 = simple_map();
        let id = map2.insert_primitive(prim_at([1.0, 0.0, 0.0], cov_small()));
        let (got, d) = map2.nearest_gaussian([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(got, id);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn split_degenerate_covariance_lands_on_snap_point() {
        let mut map = simple_map();
        let id = map.insert_primitive(prim_at([3.21, -1.7, 0.4], mat3_scale(&IDENTITY3, 1e-8)));
        let parent_level = map.get(id).level;
        let child_delta = map.schedule.delta((parent_level + 1).min(5));
        let mean = map.get(id).mean;
        let snap = [
            ((mean[0] / child_delta).floor() + 0.5) * child_delta,
            ((mean[1] / child_delta).floor() + 0.5) * child_delta,
            ((mean[2] / child_delta).floor() + 0.5) * child_delta,
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let child = map.split(id, &mut rng);
        // sqrt(1e-8) = 1e-4 per axis: sampling is effectively the snap point.
        assert!(norm3(sub3(map.get(child).mean, snap)) < 1e-3);
        assert_eq!(map.get(child).level, (parent_level + 1).min(5));
    }

    #[test]
    fn split_is_reproducible_and_stays_in_parent_cell() {
        let run = || {
            let mut map = simple_map();
            let id = map.insert_primitive(prim_at([0.9, 0.9, 0.9], mat3_scale(&IDENTITY3, 0.01)));
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            let child = map.split(id, &mut rng);
            (map.get(id).mean, map.get(child).mean, map.get(id).level)
        };
        let (parent_mean, child_mean, parent_level) = run();
        let (_, child_mean2, _) = run();
        assert_eq!(child_mean, child_mean2);
        // Child mean inside the parent's cell at the parent's level.
        let mut map = simple_map();
        let delta = map.schedule.delta(parent_level);
        let _ = &mut map;
        for a in 0..3 {
            let lo = (parent_mean[a] / delta).floor() * delta;
            assert!(child_mean[a] >= lo && child_mean[a] <= lo + delta);
        }
    }

    #[test]
    fn split_samples_follow_parent_covariance() {
        // Large cell (level 0, delta 1.6m), sigma = 0.05 so rejection is rare.
        let sigma2 = 0.0025;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        for _ in 0..1000 {
            let mut map = simple_map();
            let id = map.insert_primitive(prim_at([0.8, 0.8, 0.8], mat3_scale(&IDENTITY3, sigma2)));
            // Parent sits at level 0: its cell is the full 1.6 m voxel, so
            // rejection sampling almost never truncates.
            assert_eq!(map.get(id).level, 0);
            let child = map.split(id, &mut rng);
            samples.push(map.get(child).mean);
        }
        let mut mean = [0.0; 3];
        for s in &samples {
            mean = add3(mean, *s);
        }
        mean = scale3(mean, 1.0 / samples.len() as f64);
        let mut var = [0.0; 3];
        for s in &samples {
            for a in 0..3 {
                var[a] += (s[a] - mean[a]).powi(2);
            }
        }
        for a in 0..3 {
            var[a] /= samples.len() as f64 - 1.0;
            assert!(
                (var[a] - sigma2).abs() < 0.15 * sigma2,
                "axis {a}: var {} vs {}",
                var[a],
                sigma2
            );
        }
    }

    #[test]
    fn densify_splits_only_over_threshold() {
        let mut map = simple_map();
        let a = map.insert_primitive(prim_at([0.0; 3], cov_small()));
        let b = map.insert_primitive(prim_at([5.0, 0.0, 0.0], cov_small()));
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        // No gradients recorded: no splits.
        assert_eq!(map.densify_on_gradient(&mut rng), 0);
        // One over, one under threshold.
        let eps_a = map.schedule.epsilon(map.get(a).level);
        map.accumulate_gradient(a, eps_a * 2.0);
        map.accumulate_gradient(b, map.schedule.epsilon(map.get(b).level) * 0.5);
        assert_eq!(map.densify_on_gradient(&mut rng), 1);
        assert_eq!(map.len(), 3);
        assert_eq!(map.get(a).accum_grad, 0.0);
        map.check_index_invariant();
    }

    #[test]
    fn split_count_non_increasing_in_epsilon() {
        let grads = [1e-4, 3e-4, 9e-4, 2.7e-3, 8.1e-3];
        let mut counts = Vec::new();
        for eps0 in [1e-4, 4e-4, 1.6e-3, 6.4e-3] {
            let mut map = GaussianMap::new(init_schedule(1.6, eps0, 6).unwrap(), 0.1);
            let mut rng = ChaCha12Rng::seed_from_u64(2);
            for (i, g) in grads.iter().enumerate() {
                let id = map.insert_primitive(prim_at([i as f64 * 4.0, 0.0, 0.0], cov_small()));
                map.accumulate_gradient(id, *g);
            }
            counts.push(map.densify_on_gradient(&mut rng));
        }
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "{counts:?}");
        }
    }

    #[test]
    fn prune_removes_transparent_primitives() {
        let mut map = simple_map();
        let a = map.insert_primitive(prim_at([0.0; 3], cov_small()));
        let b = map.insert_primitive(prim_at([5.0, 0.0, 0.0], cov_small()));
        map.get_mut(a).opacity = 0.004;
        assert_eq!(map.prune(), 1);
        assert!(!map.is_alive(a));
        assert!(map.is_alive(b));
        assert_eq!(map.len(), 1);
        map.check_index_invariant();
    }

    #[test]
    fn ply_export_has_header_and_payload() {
        let mut map = simple_map();
        map.insert_primitive(prim_at([1.0, 2.0, 3.0], cov_small()));
        let ply = map.to_ply();
        let text = String::from_utf8_lossy(&ply[..200.min(ply.len())]).to_string();
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\nelement vertex 1\n"));
        let header_end = ply
            .windows(b"end_header\n".len())
            .position(|w| w == b"end_header\n")
            .unwrap()
            + b"end_header\n".len();
        // 10 doubles + 3 color bytes + 1 level byte per vertex.
        assert_eq!(ply.len() - header_end, 10 * 8 + 4);
        let x = f64::from_le_bytes(ply[header_end..header_end + 8].try_into().unwrap());
        assert_eq!(x, 1.0);
    }

    #[test]
    fn clamped_covariance_respects_bounds() {
        let tiny = mat3_scale(&IDENTITY3, 1e-12);
        let c = clamp_cov(&tiny);
        let (lam, _) = sym_eig(&c);
        assert!(lam[2] >= COV_EIG_MIN * 0.999);
        let huge = mat3_scale(&IDENTITY3, 1e6);
        let c2 = clamp_cov(&huge);
        let (lam2, _) = sym_eig(&c2);
        assert!(lam2[0] <= COV_EIG_MAX * 1.001);
    }

    proptest! {
        /// Fusion is commutative in the two observation contributions: fusing
        /// the prior with (range obs, point obs) equals fusing with
        /// (point obs treated as isotropic range-style, range treated as the
        /// anisotropic point) when their parameters swap roles.
        #[test]
        fn fusion_observation_symmetry(
            mu in prop::array::uniform3(-3.0f64..3.0),
            obs in prop::array::uniform3(-3.0f64..3.0),
            p in prop::array::uniform3(-3.0f64..3.0),
            s_eps in 0.3f64..2.0,
        ) {
            let sigma = mat3_scale(&IDENTITY3, 0.5);
            let cov_p = mat3_scale(&IDENTITY3, s_eps * s_eps);
            // cov_p equals the range-observation covariance, so swapping the
            // two observations must not change the posterior.
            let (mu_a, s_a, _) = fuse_gaussian(mu, &sigma, s_eps, obs, p, &cov_p);
            let (mu_b, s_b, _) = fuse_gaussian(mu, &sigma, s_eps, p, obs, &cov_p);
            prop_assert!(norm3(sub3(mu_a, mu_b)) < 1e-10);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((s_a[i][j] - s_b[i][j]).abs() < 1e-10);
                }
            }
        }
    }
}
