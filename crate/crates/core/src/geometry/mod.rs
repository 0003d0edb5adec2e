//! Two-view epipolar geometry on camera-normalized coordinates.

mod decompose;
mod eigen;
mod eight_point;
mod epipolar;
mod types;

use thiserror::Error;

pub use decompose::{decompose_essential, essential_candidates, midpoint_depths, pose_angular_errors};
pub use eigen::{jacobi_eigen, SymEigen, JACOBI_TOL};
pub use eight_point::{
    design_row, eig_backward, gram_to_weight_gradient, weighted_eight_point, weighted_eight_point_solve,
    weighted_gram, EightPointSolution, MIN_EIGENGAP,
};
pub use epipolar::{classify_by_epipolar, epipolar_residual, essential_from_pose, skew, symmetric_epipolar_distance};
pub use types::{denormalize_points, normalize_points, CameraIntrinsics, CorrespondenceSet, EssentialMatrix, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("not a rotation: |RᵀR - I| = {ortho:e}, det = {det}")]
    InvalidRotation { ortho: f64, det: f64 },
    #[error("translation is (near) zero or non-finite")]
    DegeneratePose,
    #[error("essential matrix has zero or non-finite norm")]
    DegenerateEssential,
    #[error("{weights} weights for {points} correspondences")]
    WeightCount { weights: usize, points: usize },
    #[error("weights must be finite and nonnegative, got {0}")]
    InvalidWeight(f64),
    #[error("need at least 8 positive weights, got {positive}")]
    InsufficientSupport { positive: usize },
    #[error("smallest eigenvalues not separated (gap {gap:e})")]
    DegenerateEigengap { gap: f64 },
    #[error("no essential decomposition places any point in front of both cameras")]
    DecompositionFailed,
}
