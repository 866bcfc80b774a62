//! Shape-adaptive feature matrices.
//!
//! The covariance (or local scatter) eigenspectrum picks one of three
//! weighting matrices for point-to-map alignment: a planar patch weights the
//! normal direction (point-to-plane), a linear structure weights its
//! direction (point-to-line), anything else blends both with the inverse
//! covariance. Sorting sigma_1 >= sigma_2 >= sigma_3 (standard deviations),
//! the cases are:
//!   sigma3/sigma2 <= tau          -> planar, m = e3 e3^T
//!   sigma1/sigma2 >= 1/tau        -> linear, m = e1 e1^T
//!   otherwise                     -> blended,
//!       m = beta1 e3 e3^T + beta2 e1 e1^T + (1 - beta1 - beta2) Sigma^{-1}
//! A spectrum satisfying both tests is planar (first case wins).

use crate::error::{Error, Result};
use crate::geometry::{mat3_add, mat3_scale, outer3, sub3, sym_eig, Mat3, Vec3, IDENTITY3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Planar,
    Linear,
    Blended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Symmetric PSD weighting matrix.
    pub m: Mat3,
    pub kind: FeatureKind,
    /// Unit eigenvector of `m` with the largest eigenvalue: the plane
    /// normal (planar), the line direction (linear), or the blended
    /// dominant axis. Used by the directional-consistency regularizer.
    pub dominant: Vec3,
    /// True when the source neighborhood was too small and the matrix fell
    /// back to an isotropic blended form.
    pub fallback: bool,
}

fn check_params(tau: f64, beta1: f64, beta2: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config("tau", "must lie in (0, 1)"));
    }
    if beta1 < 0.0 || beta2 < 0.0 || beta1 + beta2 > 1.0 {
        return Err(Error::config(
            "beta",
            "need beta1, beta2 >= 0 with beta1 + beta2 <= 1",
        ));
    }
    Ok(())
}

/// Case selection from an eigenspectrum (variances `lam` descending with
/// eigenvectors `vecs`), producing m directly. `inv_diag` supplies the
/// spectrum used for the blended inverse term.
fn from_spectrum(
    lam: [f64; 3],
    vecs: [Vec3; 3],
    tau: f64,
    beta1: f64,
    beta2: f64,
    inv_spectrum: [f64; 3],
) -> FeatureMatrix {
    let sig = [
        lam[0].max(0.0).sqrt(),
        lam[1].max(0.0).sqrt(),
        lam[2].max(0.0).sqrt(),
    ];
    let planar = sig[1] > 0.0 && sig[2] / sig[1] <= tau;
    if planar {
        return FeatureMatrix {
            m: outer3(vecs[2], vecs[2]),
            kind: FeatureKind::Planar,
            dominant: vecs[2],
            fallback: false,
        };
    }
    let linear = sig[1] == 0.0 || sig[0] / sig[1] >= 1.0 / tau;
    if linear {
        return FeatureMatrix {
            m: outer3(vecs[0], vecs[0]),
            kind: FeatureKind::Linear,
            dominant: vecs[0],
            fallback: false,
        };
    }
    let mut m = mat3_add(
        &mat3_scale(&outer3(vecs[2], vecs[2]), beta1),
        &mat3_scale(&outer3(vecs[0], vecs[0]), beta2),
    );
    let w = 1.0 - beta1 - beta2;
    for i in 0..3 {
        m = mat3_add(&m, &mat3_scale(&outer3(vecs[i], vecs[i]), w * inv_spectrum[i]));
    }
    let (_, mvecs) = sym_eig(&m);
    FeatureMatrix {
        m,
        kind: FeatureKind::Blended,
        dominant: mvecs[0],
        fallback: false,
    }
}

/// Feature matrix of a map Gaussian from its covariance.
pub fn feature_matrix_from_gaussian(
    sigma: &Mat3,
    tau: f64,
    beta1: f64,
    beta2: f64,
) -> Result<FeatureMatrix> {
    check_params(tau, beta1, beta2)?;
    let (lam, vecs) = sym_eig(sigma);
    if lam[2] <= 0.0 {
        return Err(Error::SingularMatrix {
            context: "feature_matrix_from_gaussian",
        });
    }
    // Blended case uses Sigma^{-1} = sum_i lam_i^{-1} v_i v_i^T exactly.
    let inv = [1.0 / lam[0], 1.0 / lam[1], 1.0 / lam[2]];
    Ok(from_spectrum(lam, vecs, tau, beta1, beta2, inv))
}

/// Feature matrix of a cloud point from its neighborhood (point included).
/// Fewer than 5 neighbors falls back to an isotropic blended matrix with
/// `fallback` set. The blended case inverts the scatter normalized to unit
/// mean eigenvalue and regularized by 1e-6, which keeps the matrix scale
/// comparable to the rank-one planar/linear cases.
pub fn feature_matrix_from_point(
    neighborhood: &[Vec3],
    tau: f64,
    beta1: f64,
    beta2: f64,
) -> Result<FeatureMatrix> {
    check_params(tau, beta1, beta2)?;
    let isotropic_fallback = |fallback: bool| {
        let w = 1.0 - beta1 - beta2;
        let mut m = mat3_scale(&IDENTITY3, w);
        m[0][0] += beta2; // e1 = x for the identity spectrum
        m[2][2] += beta1; // e3 = z
        FeatureMatrix {
            m,
            kind: FeatureKind::Blended,
            dominant: sym_eig(&m).1[0],
            fallback,
        }
    };
    if neighborhood.len() < 5 {
        return Ok(isotropic_fallback(true));
    }
    let n = neighborhood.len() as f64;
    let mut mean = [0.0; 3];
    for p in neighborhood {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    let mut scatter = [[0.0; 3]; 3];
    for p in neighborhood {
        let d = sub3(*p, mean);
        scatter = mat3_add(&scatter, &outer3(d, d));
    }
    scatter = mat3_scale(&scatter, 1.0 / n);
    let trace = scatter[0][0] + scatter[1][1] + scatter[2][2];
    if trace <= 0.0 {
        // All neighbors coincide: no anisotropy information.
        return Ok(isotropic_fallback(true));
    }
    let normalized = mat3_scale(&scatter, 3.0 / trace);
    let (lam, vecs) = sym_eig(&normalized);
    let inv = [
        1.0 / (lam[0].max(0.0) + 1e-6),
        1.0 / (lam[1].max(0.0) + 1e-6),
        1.0 / (lam[2].max(0.0) + 1e-6),
    ];
    Ok(from_spectrum(lam, vecs, tau, beta1, beta2, inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dot3, norm3};

    fn diag(a: f64, b: f64, c: f64) -> Mat3 {
        [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
    }

    #[test]
    fn flat_covariance_is_planar() {
        let f = feature_matrix_from_gaussian(&diag(1.0, 1.0, 0.01), 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Planar);
        // sigma3/sigma2 = 0.1 <= 0.33; m = e3 e3^T = diag(0,0,1).
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == 2 && j == 2 { 1.0 } else { 0.0 };
                assert!((f.m[i][j] - want).abs() < 1e-12);
            }
        }
        assert!((f.dominant[2].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elongated_covariance_is_linear() {
        let f = feature_matrix_from_gaussian(&diag(16.0, 1.0, 1.0), 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Linear);
        // sigma1/sigma2 = 4 >= 1/0.33; m = e1 e1^T = diag(1,0,0).
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert!((f.m[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isotropic_covariance_blends() {
        let f = feature_matrix_from_gaussian(&diag(1.0, 1.0, 1.0), 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Blended);
        // 0.3 e3e3^T + 0.3 e1e1^T + 0.4 I with the canonical axis order.
        let want = diag(0.7, 0.4, 0.7);
        for i in 0..3 {
            for j in 0..3 {
                assert!((f.m[i][j] - want[i][j]).abs() < 1e-12, "{i}{j}");
            }
        }
    }

    #[test]
    fn needle_disk_ambiguity_prefers_planar() {
        // sigma = (10, 1, 0.1): sigma3/sigma2 = 0.1 <= tau AND
        // sigma1/sigma2 = 10 >= 1/tau. First case wins.
        let f = feature_matrix_from_gaussian(&diag(100.0, 1.0, 0.01), 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Planar);
    }

    #[test]
    fn degenerate_covariance_is_an_error() {
        assert!(feature_matrix_from_gaussian(&diag(1.0, 1.0, 0.0), 0.33, 0.3, 0.3).is_err());
        assert!(feature_matrix_from_gaussian(&diag(1.0, 1.0, 1.0), 1.5, 0.3, 0.3).is_err());
        assert!(feature_matrix_from_gaussian(&diag(1.0, 1.0, 1.0), 0.33, 0.8, 0.3).is_err());
    }

    #[test]
    fn coplanar_points_give_plane_normal() {
        let pts: Vec<Vec3> = (0..20)
            .map(|i| {
                let f = i as f64;
                [(f * 0.7).sin() * 2.0, (f * 1.3).cos() * 2.0, 0.0]
            })
            .collect();
        let f = feature_matrix_from_point(&pts, 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Planar);
        assert!(!f.fallback);
        // m ~ n n^T with n = +/- z.
        assert!((f.m[2][2] - 1.0).abs() < 1e-9);
        assert!(f.m[0][0].abs() < 1e-9 && f.m[1][1].abs() < 1e-9);
    }

    #[test]
    fn collinear_points_give_line_direction() {
        let pts: Vec<Vec3> = (0..20).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let f = feature_matrix_from_point(&pts, 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Linear);
        assert!((f.m[0][0] - 1.0).abs() < 1e-9);
        assert!((norm3(f.dominant) - 1.0).abs() < 1e-12);
        assert!(dot3(f.dominant, [1.0, 0.0, 0.0]).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn ball_sample_blends() {
        // Deterministic near-uniform ball sample.
        let mut pts = Vec::new();
        for i in 0..40 {
            let f = i as f64;
            let u = (f * 0.618_033_988_75).fract() * 2.0 - 1.0;
            let th = f * 2.399_963_229_7;
            let r = (0.3 + 0.7 * ((f * 0.37).fract())).cbrt();
            let s = (1.0 - u * u).max(0.0).sqrt();
            pts.push([r * s * th.cos(), r * s * th.sin(), r * u]);
        }
        let f = feature_matrix_from_point(&pts, 0.33, 0.3, 0.3).unwrap();
        assert_eq!(f.kind, FeatureKind::Blended);
    }

    #[test]
    fn tiny_neighborhood_falls_back() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let f = feature_matrix_from_point(&pts, 0.33, 0.3, 0.3).unwrap();
        assert!(f.fallback);
        assert_eq!(f.kind, FeatureKind::Blended);
        // Coincident points carry no anisotropy either.
        let same = vec![[1.0, 2.0, 3.0]; 8];
        let f2 = feature_matrix_from_point(&same, 0.33, 0.3, 0.3).unwrap();
        assert!(f2.fallback);
    }
}
