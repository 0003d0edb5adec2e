use nalgebra::{Matrix3, Vector3};

use super::{CorrespondenceSet, EssentialMatrix, GeometryError, Pose};

/// Cross-product matrix: `skew(v) * w == v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `E = [t]× R`, scaled to unit Frobenius norm.
pub fn essential_from_pose(pose: &Pose) -> Result<EssentialMatrix, GeometryError> {
    if pose.translation.norm() <= 1e-12 {
        return Err(GeometryError::DegeneratePose);
    }
    EssentialMatrix::from_matrix(skew(&pose.translation) * pose.rotation)
}

/// Algebraic epipolar residual `x̃2ᵀ E x̃1`.
pub fn epipolar_residual(x1: [f64; 2], x2: [f64; 2], e: &EssentialMatrix) -> f64 {
    let a = Vector3::new(x1[0], x1[1], 1.0);
    let b = Vector3::new(x2[0], x2[1], 1.0);
    b.dot(&(e.matrix() * a))
}

/// Squared residual over the squared gradients of both epipolar lines:
///
/// `r² · (1 / ((E x̃1)₀² + (E x̃1)₁²) + 1 / ((Eᵀ x̃2)₀² + (Eᵀ x̃2)₁²))`.
///
/// Returns `+∞` when either line is degenerate, which any threshold treats
/// as an outlier.
pub fn symmetric_epipolar_distance(x1: [f64; 2], x2: [f64; 2], e: &EssentialMatrix) -> f64 {
    let a = Vector3::new(x1[0], x1[1], 1.0);
    let b = Vector3::new(x2[0], x2[1], 1.0);
    let l2 = e.matrix() * a;
    let l1 = e.matrix().transpose() * b;
    let r = b.dot(&l2);
    let n2 = l2.x * l2.x + l2.y * l2.y;
    let n1 = l1.x * l1.x + l1.y * l1.y;
    if n1 == 0.0 || n2 == 0.0 {
        return f64::INFINITY;
    }
    r * r * (1.0 / n2 + 1.0 / n1)
}

/// Inlier flags: symmetric epipolar distance strictly below `tau`.
pub fn classify_by_epipolar(corrs: &CorrespondenceSet, e: &EssentialMatrix, tau: f64) -> Vec<bool> {
    assert!(tau > 0.0, "threshold must be positive");
    corrs
        .points
        .iter()
        .map(|p| symmetric_epipolar_distance([p[0], p[1]], [p[2], p[3]], e) < tau)
        .collect()
}
