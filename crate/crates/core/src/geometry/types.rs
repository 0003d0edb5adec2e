use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Pixel to camera-normalized coordinates.
    pub fn normalize(&self, px: f64, py: f64) -> (f64, f64) {
        ((px - self.cx) / self.fx, (py - self.cy) / self.fy)
    }

    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.fx + self.cx, y * self.fy + self.cy)
    }

    /// Projects a point given in this camera's frame to pixels.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        self.denormalize(p.x / p.z, p.y / p.z)
    }
}

/// Pose of camera 2 relative to camera 1: `X2 = R X1 + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Validates `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(GeometryError::InvalidRotation { ortho, det });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::DegeneratePose);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Essential matrix scaled to unit Frobenius norm. `E` and `-E` describe
/// the same geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let norm = m.norm();
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(GeometryError::DegenerateEssential);
        }
        Ok(Self(m / norm))
    }

    /// From nine row-major entries.
    pub fn from_vector(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries.
    pub fn to_vector(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    /// Frobenius distance modulo sign.
    pub fn distance(&self, other: &EssentialMatrix) -> f64 {
        (self.0 - other.0).norm().min((self.0 + other.0).norm())
    }
}

/// Putative matches in camera-normalized coordinates `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub points: Vec<[f64; 4]>,
    pub labels: Option<Vec<bool>>,
}

impl CorrespondenceSet {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<[f64; 4]>, labels: Vec<bool>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per correspondence");
        Self {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the correspondences whose mask entry is set.
    pub fn subset(&self, mask: &[bool]) -> Self {
        let keep = |i: &usize| mask[*i];
        Self {
            points: (0..self.len()).filter(keep).map(|i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| (0..self.len()).filter(keep).map(|i| l[i]).collect()),
        }
    }
}

/// Maps pixel matches `[p1x, p1y, p2x, p2y]` to normalized coordinates.
pub fn normalize_points(
    pixels: &[[f64; 4]],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> CorrespondenceSet {
    CorrespondenceSet::new(
        pixels
            .iter()
            .map(|p| {
                let (x1, y1) = k1.normalize(p[0], p[1]);
                let (x2, y2) = k2.normalize(p[2], p[3]);
                [x1, y1, x2, y2]
            })
            .collect(),
    )
}

/// Inverse of [`normalize_points`].
pub fn denormalize_points(
    corrs: &CorrespondenceSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Vec<[f64; 4]> {
    corrs
        .points
        .iter()
        .map(|p| {
            let (x1, y1) = k1.denormalize(p[0], p[1]);
            let (x2, y2) = k2.denormalize(p[2], p[3]);
            [x1, y1, x2, y2]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_point_maps_to_origin() {
        let k = CameraIntrinsics::new(600.0, 500.0, 320.0, 240.0).unwrap();
        let c = normalize_points(&[[320.0, 240.0, 320.0, 240.0]], &k, &k);
        assert_eq!(c.points[0], [0.0; 4]);
    }

    #[test]
    fn unit_intrinsics_are_identity() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let px = [[1.5, -2.0, 3.25, 7.0]];
        assert_eq!(normalize_points(&px, &k, &k).points[0], px[0]);
    }

    #[test]
    fn normalization_round_trips() {
        let k1 = CameraIntrinsics::new(612.3, 598.1, 317.7, 331.9).unwrap();
        let k2 = CameraIntrinsics::new(580.0, 590.5, 300.2, 290.8).unwrap();
        let px: Vec<[f64; 4]> = (0..20)
            .map(|i| {
                let f = i as f64;
                [f * 31.7, 640.0 - f * 13.1, f * 7.9 + 3.0, f * 29.3]
            })
            .collect();
        let back = denormalize_points(&normalize_points(&px, &k1, &k2), &k1, &k2);
        for (a, b) in px.iter().zip(&back) {
            for j in 0..4 {
                assert!((a[j] - b[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invalid_intrinsics_and_rotations_are_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector3::z()).is_err());
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::z()).is_err());
    }
}
