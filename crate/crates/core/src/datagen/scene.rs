use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose};

/// Ground-truth camera pair and the world points both cameras see.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub pose: Pose,
    /// Points in the camera-1 frame.
    pub points3d: Vec<Vector3<f64>>,
}

impl ScenePair {
    /// Pixel projections of `points3d[i]` in both images.
    pub fn project(&self, i: usize) -> [f64; 4] {
        let p1 = &self.points3d[i];
        let p2 = self.pose.transform(p1);
        let (u1, v1) = self.k1.project(p1);
        let (u2, v2) = self.k2.project(&p2);
        [u1, v1, u2, v2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_points: usize,
    pub focal_px: f64,
    /// Square image side in pixels; the principal point is its centre.
    pub image_size: f64,
    pub max_rotation_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 512,
            focal_px: 600.0,
            image_size: 640.0,
            max_rotation_deg: 30.0,
            min_depth: 4.0,
            max_depth: 20.0,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let c = self.image_size / 2.0;
        CameraIntrinsics {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: c,
            cy: c,
        }
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        (0.0..self.image_size).contains(&u) && (0.0..self.image_size).contains(&v)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Samples a relative pose and `n_points` world points that project inside
/// both images at depths within `[min_depth, max_depth]` of camera 1.
///
/// The rotation axis is uniform on the sphere and its angle uniform in
/// `[0, max_rotation_deg]`; the translation is a uniform unit direction, so
/// the baseline-to-depth ratio lies in `[1/max_depth, 1/min_depth]`.
pub fn sample_scene(rng: &mut ChaCha8Rng, config: &SceneConfig) -> ScenePair {
    let k = config.intrinsics();
    loop {
        let axis = Unit::new_normalize(unit_vector(rng));
        let angle = rng.random_range(0.0..=config.max_rotation_deg).to_radians();
        let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
        let pose = Pose {
            rotation,
            translation: unit_vector(rng),
        };

        let budget = 400 * config.n_points.max(1);
        let mut points = Vec::with_capacity(config.n_points);
        for _ in 0..budget {
            if points.len() == config.n_points {
                break;
            }
            let u = rng.random_range(0.0..config.image_size);
            let v = rng.random_range(0.0..config.image_size);
            let z = rng.random_range(config.min_depth..=config.max_depth);
            let (x, y) = k.normalize(u, v);
            let p1 = Vector3::new(x * z, y * z, z);
            let p2 = pose.transform(&p1);
            if p2.z <= 0.0 {
                continue;
            }
            let (u2, v2) = k.project(&p2);
            if config.in_image(u2, v2) {
                points.push(p1);
            }
        }
        // too little overlap: draw another pose
        if points.len() == config.n_points {
            return ScenePair {
                k1: k,
                k2: k,
                pose,
                points3d: points,
            };
        }
    }
}
