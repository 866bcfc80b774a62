//! Fixed-size 3D linear algebra and SE(3) primitives.
//!
//! Everything the pipeline needs is 3x3 or 6x6, so the kernels are written
//! out directly: a cyclic Jacobi eigensolver for symmetric matrices, SVD via
//! the eigendecomposition of A^T A, Rodrigues exponential/logarithm on SO(3),
//! and a rigid-body pose. All routines are deterministic: given identical
//! input bits they produce identical output bits, with no ordering left to
//! chance (eigenpairs are sorted by eigenvalue, ties broken lexicographically
//! on the sign-canonicalized eigenvectors).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

// ---------------------------------------------------------------------------
// Vec3 / Mat3 arithmetic
// ---------------------------------------------------------------------------

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    if n == 0.0 {
        a
    } else {
        scale3(a, 1.0 / n)
    }
}

/// Outer product a b^T.
#[inline]
pub fn outer3(a: Vec3, b: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i] * b[j];
        }
    }
    m
}

#[inline]
pub fn mat3_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i][j] + b[i][j];
        }
    }
    m
}

#[inline]
pub fn mat3_sub(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i][j] - b[i][j];
        }
    }
    m
}

#[inline]
pub fn mat3_scale(a: &Mat3, s: f64) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i][j] * s;
        }
    }
    m
}

#[inline]
pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    m
}

#[inline]
pub fn mat3_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

#[inline]
pub fn mat3_trace(a: &Mat3) -> f64 {
    a[0][0] + a[1][1] + a[2][2]
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse by adjugate. Errors when |det| falls below an absolute floor
/// relative to the matrix scale.
pub fn mat3_inv(a: &Mat3) -> Result<Mat3> {
    let det = mat3_det(a);
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(1e-300);
    if det.abs() < 1e-14 * scale * scale * scale {
        return Err(Error::SingularMatrix {
            context: "mat3_inv",
        });
    }
    let inv_det = 1.0 / det;
    let mut m = [[0.0; 3]; 3];
    m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
    m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
    m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
    m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
    m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
    m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
    m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
    m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
    m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
    Ok(m)
}

/// Solve a x = b for symmetric positive definite a (3x3) via the inverse.
pub fn solve3(a: &Mat3, b: Vec3) -> Result<Vec3> {
    Ok(mat3_vec(&mat3_inv(a)?, b))
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Flip the sign of `v` so its largest-magnitude component is positive.
/// Ties pick the first such component, so the result is deterministic.
fn canonical_sign(v: Vec3) -> Vec3 {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        scale3(v, -1.0)
    } else {
        v
    }
}

/// Eigendecomposition of a symmetric 3x3 matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted in
/// descending order and `eigenvectors[i]` the unit eigenvector paired with
/// `eigenvalues[i]`. Each eigenvector's sign is canonicalized
/// (largest-magnitude component positive) and exact eigenvalue ties are
/// ordered lexicographically-descending on the canonicalized vectors, so the
/// output is a pure function of the input bits. For the identity matrix this
/// yields the axes in the order e_x, e_y, e_z.
pub fn sym_eig(m: &Mat3) -> ([f64; 3], [Vec3; 3]) {
    // Symmetrize exactly so asymmetric rounding noise cannot steer pivots.
    let mut a = *m;
    for p in 0..3 {
        for q in (p + 1)..3 {
            let avg = 0.5 * (a[p][q] + a[q][p]);
            a[p][q] = avg;
            a[q][p] = avg;
        }
    }
    let frob2: f64 = a.iter().flatten().map(|x| x * x).sum();
    let mut v = IDENTITY3;
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off <= f64::EPSILON * f64::EPSILON * frob2 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let tau = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = if tau >= 0.0 {
                1.0 / (tau + (1.0 + tau * tau).sqrt())
            } else {
                -1.0 / (-tau + (1.0 + tau * tau).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let mut g = IDENTITY3;
            g[p][p] = c;
            g[q][q] = c;
            g[p][q] = s;
            g[q][p] = -s;
            a = mat3_mul(&mat3_mul(&mat3_transpose(&g), &a), &g);
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            v = mat3_mul(&v, &g);
        }
    }
    let mut pairs: [(f64, Vec3); 3] = [
        (a[0][0], canonical_sign([v[0][0], v[1][0], v[2][0]])),
        (a[1][1], canonical_sign([v[0][1], v[1][1], v[2][1]])),
        (a[2][2], canonical_sign([v[0][2], v[1][2], v[2][2]])),
    ];
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then_with(|| y.1.partial_cmp(&x.1).unwrap())
    });
    (
        [pairs[0].0, pairs[1].0, pairs[2].0],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

// ---------------------------------------------------------------------------
// SVD (3x3) via eig(A^T A)
// ---------------------------------------------------------------------------

/// Singular value decomposition a = U diag(s) V^T with s descending and
/// U, V orthogonal. Rank-deficient inputs get their null directions completed
/// by cross products, keeping the factors orthonormal.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let ata = mat3_mul(&mat3_transpose(a), a);
    let (lam, vvec) = sym_eig(&ata);
    let s = [
        lam[0].max(0.0).sqrt(),
        lam[1].max(0.0).sqrt(),
        lam[2].max(0.0).sqrt(),
    ];
    let tol = 1e-12 * s[0].max(1e-300);
    let mut u: [Vec3; 3] = [[0.0; 3]; 3];
    for i in 0..3 {
        if s[i] > tol {
            u[i] = scale3(mat3_vec(a, vvec[i]), 1.0 / s[i]);
        } else {
            u[i] = [f64::NAN; 3]; // completed below
        }
    }
    // Complete missing left singular vectors into an orthonormal frame.
    for i in 0..3 {
        if u[i][0].is_nan() {
            u[i] = complete_orthonormal(&u, i);
        }
        // Re-orthogonalize against the previous columns for stability.
        for j in 0..i {
            let d = dot3(u[i], u[j]);
            u[i] = sub3(u[i], scale3(u[j], d));
        }
        u[i] = normalize3(u[i]);
    }
    let mut umat = [[0.0; 3]; 3];
    let mut vmat = [[0.0; 3]; 3];
    for i in 0..3 {
        for r in 0..3 {
            umat[r][i] = u[i][r];
            vmat[r][i] = vvec[i][r];
        }
    }
    (umat, s, vmat)
}

/// Pick a unit vector orthogonal to the already-valid columns in `u`,
/// skipping index `i`.
fn complete_orthonormal(u: &[Vec3; 3], i: usize) -> Vec3 {
    let valid: Vec<Vec3> = (0..3)
        .filter(|&j| j != i && !u[j][0].is_nan())
        .map(|j| u[j])
        .collect();
    match valid.len() {
        2 => normalize3(cross3(valid[0], valid[1])),
        1 => {
            // Any unit vector orthogonal to valid[0]; pick the axis least
            // aligned with it for stability.
            let a = valid[0];
            let mut k = 0;
            for j in 1..3 {
                if a[j].abs() < a[k].abs() {
                    k = j;
                }
            }
            let mut e = [0.0; 3];
            e[k] = 1.0;
            normalize3(sub3(e, scale3(a, dot3(e, a))))
        }
        _ => {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            e
        }
    }
}

// ---------------------------------------------------------------------------
// SO(3): hat/vee, exponential, logarithm
// ---------------------------------------------------------------------------

#[inline]
pub fn so3_hat(w: Vec3) -> Mat3 {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

#[inline]
pub fn so3_vee(m: &Mat3) -> Vec3 {
    [m[2][1], m[0][2], m[1][0]]
}

/// Rodrigues exponential map. Uses series expansions below 1e-4 rad so the
/// small-angle limit is exact to machine precision.
pub fn exp_so3(w: Vec3) -> Mat3 {
    let th2 = dot3(w, w);
    let th = th2.sqrt();
    let (a, b) = if th < 1e-4 {
        (
            1.0 - th2 / 6.0 * (1.0 - th2 / 20.0),
            0.5 * (1.0 - th2 / 12.0 * (1.0 - th2 / 30.0)),
        )
    } else {
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    let k = so3_hat(w);
    let k2 = mat3_mul(&k, &k);
    mat3_add(&IDENTITY3, &mat3_add(&mat3_scale(&k, a), &mat3_scale(&k2, b)))
}

/// Inverse of [`exp_so3`]. Errors within 1e-6 rad of a pi rotation, where the
/// axis is not a continuous function of the matrix.
pub fn log_so3(r: &Mat3) -> Result<Vec3> {
    const MARGIN: f64 = 1e-6;
    let cos_th = ((mat3_trace(r) - 1.0) * 0.5).clamp(-1.0, 1.0);
    let th = cos_th.acos();
    if th > std::f64::consts::PI - MARGIN {
        return Err(Error::AngleNearPi { margin: MARGIN });
    }
    let v = [
        (r[2][1] - r[1][2]) * 0.5,
        (r[0][2] - r[2][0]) * 0.5,
        (r[1][0] - r[0][1]) * 0.5,
    ];
    if th > 3.0 * std::f64::consts::FRAC_PI_4 {
        // Close to pi the antisymmetric part shrinks like sin(theta) and the
        // direct formula amplifies its roundoff by 1/sin(theta). The
        // symmetric part stays well conditioned: (R + R^T)/2 = cos(theta) I
        // + (1 - cos(theta)) a a^T, so take the axis from its strongest
        // column and only the sign from the antisymmetric part.
        let th = std::f64::consts::PI - norm3(v).min(1.0).asin();
        let denom = 1.0 - cos_th;
        let mut aat = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let sym = (r[i][j] + r[j][i]) * 0.5;
                aat[i][j] = (sym - if i == j { cos_th } else { 0.0 }) / denom;
            }
        }
        let mut k = 0;
        for i in 1..3 {
            if aat[i][i] > aat[k][k] {
                k = i;
            }
        }
        let mut axis = normalize3([aat[0][k], aat[1][k], aat[2][k]]);
        if dot3(axis, v) < 0.0 {
            axis = scale3(axis, -1.0);
        }
        return Ok(scale3(axis, th));
    }
    let f = if th < 1e-7 {
        1.0 + th * th / 6.0
    } else {
        th / th.sin()
    };
    Ok(scale3(v, f))
}

/// Angle in radians of the rotation r.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((mat3_trace(r) - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Nearest rotation matrix in the Frobenius sense (polar factor via SVD).
/// Used to keep long products of rotations orthonormal.
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let (u, _s, v) = svd3(r);
    let mut rot = mat3_mul(&u, &mat3_transpose(&v));
    if mat3_det(&rot) < 0.0 {
        // Flip the weakest singular direction to stay in SO(3).
        let mut u2 = u;
        for row in u2.iter_mut() {
            row[2] = -row[2];
        }
        rot = mat3_mul(&u2, &mat3_transpose(&v));
    }
    rot
}

// ---------------------------------------------------------------------------
// Quaternions (w, x, y, z) for trajectory serialization
// ---------------------------------------------------------------------------

/// Rotation matrix to unit quaternion (w, x, y, z), w >= 0.
pub fn mat3_to_quat(r: &Mat3) -> [f64; 4] {
    let tr = mat3_trace(r);
    let mut q;
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        q = [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ];
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        q = [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ];
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        q = [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ];
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        q = [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ];
    }
    if q[0] < 0.0 {
        for x in q.iter_mut() {
            *x = -*x;
        }
    }
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    for x in q.iter_mut() {
        *x /= n;
    }
    q
}

/// Unit quaternion (w, x, y, z) to rotation matrix.
pub fn quat_to_mat3(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

// ---------------------------------------------------------------------------
// Rigid-body pose
// ---------------------------------------------------------------------------

/// Rigid transform: maps a point p to rotation * p + translation.
/// `stamp` is the acquisition time in seconds; group operations keep the
/// left operand's stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub stamp: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: IDENTITY3,
            translation: [0.0; 3],
            stamp: 0.0,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3, stamp: f64) -> Self {
        Pose {
            rotation,
            translation,
            stamp,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat3_mul(&self.rotation, &other.rotation),
            translation: add3(mat3_vec(&self.rotation, other.translation), self.translation),
            stamp: self.stamp,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = mat3_transpose(&self.rotation);
        Pose {
            rotation: rt,
            translation: scale3(mat3_vec(&rt, self.translation), -1.0),
            stamp: self.stamp,
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add3(mat3_vec(&self.rotation, p), self.translation)
    }

    /// Left-multiplicative update: exp(omega), delta_t applied in front.
    pub fn retract(&self, omega: Vec3, delta_t: Vec3) -> Pose {
        let dr = exp_so3(omega);
        Pose {
            rotation: mat3_mul(&dr, &self.rotation),
            translation: add3(mat3_vec(&dr, self.translation), delta_t),
            stamp: self.stamp,
        }
    }
}

// ---------------------------------------------------------------------------
// 6x6 SPD solve (Cholesky) for Gauss-Newton steps
// ---------------------------------------------------------------------------

/// Solve a x = b for a symmetric positive definite 6x6 a.
/// Returns None when a pivot collapses (a not positive definite).
pub fn solve_sym6(a: &[[f64; 6]; 6], b: &[f64; 6]) -> Option<[f64; 6]> {
    let mut l = [[0.0f64; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // Forward substitution L y = b
    let mut y = [0.0f64; 6];
    for i in 0..6 {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    // Back substitution L^T x = y
    let mut x = [0.0f64; 6];
    for i in (0..6).rev() {
        let mut sum = y[i];
        for k in (i + 1)..6 {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}
