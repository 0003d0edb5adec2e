use nalgebra::{Matrix3, Vector3};

use super::eigen::jacobi_eigen;
use super::{CorrespondenceSet, EssentialMatrix, GeometryError, Pose};

/// SVD `E = U Σ Vᵀ` of a 3×3 matrix via Jacobi on `EᵀE`, with `U` and `V`
/// proper rotations. The third left singular vector is completed as
/// `u1 × u2`, so the smallest singular value is treated as zero.
fn essential_svd(e: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let ete = e.transpose() * e;
    let eig = jacobi_eigen(ete.as_slice(), 3);
    // nalgebra storage is column-major, but EᵀE is symmetric
    let col = |k: usize| {
        let v = eig.vector(k);
        Vector3::new(v[0], v[1], v[2])
    };
    let (v1, v2) = (col(2), col(1));
    let mut v3 = v1.cross(&v2);
    let u1 = (e * v1).normalize();
    let mut u2 = e * v2;
    // orthogonalize against round-off before completing the frame
    u2 -= u1 * u1.dot(&u2);
    let u2 = u2.normalize();
    let u3 = u1.cross(&u2);
    let vm = Matrix3::from_columns(&[v1, v2, v3]);
    if vm.determinant() < 0.0 {
        v3 = -v3;
    }
    (
        Matrix3::from_columns(&[u1, u2, u3]),
        Matrix3::from_columns(&[v1, v2, v3]),
    )
}

/// The four `(R, t̂)` factorizations of `E`, with unit `t̂`.
pub fn essential_candidates(e: &EssentialMatrix) -> [Pose; 4] {
    let (u, v) = essential_svd(e.matrix());
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)].map(|(rotation, translation)| Pose {
        rotation,
        translation,
    })
}

/// Midpoint triangulation; returns the depths in both cameras, or `None`
/// for (near-)parallel rays.
pub fn midpoint_depths(pose: &Pose, p: &[f64; 4]) -> Option<(f64, f64)> {
    let d1 = Vector3::new(p[0], p[1], 1.0);
    let rt = pose.rotation.transpose();
    let o2 = -(rt * pose.translation);
    let d2 = rt * Vector3::new(p[2], p[3], 1.0);
    // minimize |s1 d1 - (o2 + s2 d2)|
    let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
    let (d, e) = (d1.dot(&o2), d2.dot(&o2));
    let det = b * b - a * c;
    if det.abs() <= 1e-12 * a * c {
        return None;
    }
    let s1 = (b * e - c * d) / det;
    let s2 = (a * e - b * d) / det;
    let point = 0.5 * (d1 * s1 + o2 + d2 * s2);
    Some((point.z, pose.transform(&point).z))
}

fn count_in_front(pose: &Pose, corrs: &CorrespondenceSet, mask: Option<&[bool]>) -> usize {
    corrs
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .filter_map(|(_, p)| midpoint_depths(pose, p))
        .filter(|&(z1, z2)| z1 > 0.0 && z2 > 0.0)
        .count()
}

/// Recovers `(R, t̂)` from `E` by cheirality voting over the correspondences
/// selected by `mask` (all of them when `None`).
pub fn decompose_essential(
    e: &EssentialMatrix,
    corrs: &CorrespondenceSet,
    mask: Option<&[bool]>,
) -> Result<Pose, GeometryError> {
    if let Some(m) = mask {
        assert_eq!(m.len(), corrs.len(), "one mask entry per correspondence");
    }
    let mut best: Option<(usize, Pose)> = None;
    for pose in essential_candidates(e) {
        let votes = count_in_front(&pose, corrs, mask);
        if votes > best.as_ref().map_or(0, |b| b.0) {
            best = Some((votes, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(GeometryError::DecompositionFailed)
}

/// Rotation and translation-direction errors in degrees. The translation
/// error ignores sign, which the essential matrix cannot fix.
///
/// Angles are taken with `atan2(sin, cos)`, which equals the clamped
/// `acos` of the cosine but keeps full precision near zero.
pub fn pose_angular_errors(gt: &Pose, pred: &Pose) -> (f64, f64) {
    let rel = gt.rotation.transpose() * pred.rotation;
    let cos_r = (rel.trace() - 1.0) / 2.0;
    let axis = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin_r = axis.norm() / 2.0;
    let err_r = sin_r.atan2(cos_r.clamp(-1.0, 1.0)).to_degrees();

    let (a, b) = (gt.translation, pred.translation);
    let err_t = if a.norm() > 0.0 && b.norm() > 0.0 {
        a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees()
    } else {
        90.0
    };
    (err_r, err_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn identical_poses_have_zero_error() {
        let r = Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let p = Pose::new(r, Vector3::new(0.2, 0.1, 1.0)).unwrap();
        let (er, et) = pose_angular_errors(&p, &p);
        assert!(er < 1e-6 && et < 1e-6);
    }

    #[test]
    fn ten_degree_rotation_about_z() {
        let gt = Pose::new(Matrix3::identity(), Vector3::x()).unwrap();
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).into_inner();
        let pred = Pose::new(r, Vector3::x()).unwrap();
        let (er, _) = pose_angular_errors(&gt, &pred);
        assert!((er - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn translation_error_ignores_sign() {
        let gt = Pose::new(Matrix3::identity(), Vector3::new(0.3, -0.4, 1.2)).unwrap();
        let pred = Pose::new(Matrix3::identity(), -gt.translation).unwrap();
        assert_eq!(pose_angular_errors(&gt, &pred).1, 0.0);
    }

    #[test]
    fn four_candidates_all_proper_rotations() {
        let e = EssentialMatrix::from_matrix(
            super::super::skew(&Vector3::new(0.2, 0.1, 1.0))
                * Rotation3::from_euler_angles(0.05, 0.1, -0.2).into_inner(),
        )
        .unwrap();
        let cands = essential_candidates(&e);
        assert_eq!(cands.len(), 4);
        for c in &cands {
            assert!((c.rotation.determinant() - 1.0).abs() < 1e-12);
            assert!((c.translation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_support_fails() {
        let e = EssentialMatrix::from_matrix(super::super::skew(&Vector3::z())).unwrap();
        let c = CorrespondenceSet::new(vec![[0.1, 0.2, 0.1, 0.2]]);
        assert_eq!(
            decompose_essential(&e, &c, Some(&[false])),
            Err(GeometryError::DecompositionFailed)
        );
    }
}
