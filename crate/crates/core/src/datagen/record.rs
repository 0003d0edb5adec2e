use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use serde_json::error::Category;

use super::scene::ScenePair;
use crate::jsonfmt::{push_f64_array, push_string};
use super::DataGenError;
use crate::geometry::{
    essential_from_pose, normalize_points, CameraIntrinsics, CorrespondenceSet, EssentialMatrix, GeometryError,
    Pose,
};

/// One labeled image pair: intrinsics, ground-truth pose, pixel matches and
/// inlier flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub pair_id: String,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    /// Row-major rotation of camera 2 relative to camera 1.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Pixel matches `[p1x, p1y, p2x, p2y]`.
    pub correspondences: Vec<[f64; 4]>,
    pub labels: Vec<bool>,
}

impl DatasetRecord {
    pub(crate) fn new(pair_id: String, scene: &ScenePair, correspondences: Vec<[f64; 4]>, labels: Vec<bool>) -> Self {
        let r = &scene.pose.rotation;
        let t = &scene.pose.translation;
        Self {
            pair_id,
            k1: scene.k1,
            k2: scene.k2,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: [t.x, t.y, t.z],
            correspondences,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }

    pub fn pose(&self) -> Result<Pose, GeometryError> {
        Pose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_row_slice(&self.translation),
        )
    }

    pub fn essential(&self) -> Result<EssentialMatrix, GeometryError> {
        essential_from_pose(&self.pose()?)
    }

    /// Normalized correspondences carrying the ground-truth labels.
    pub fn normalized(&self) -> CorrespondenceSet {
        let mut c = normalize_points(&self.correspondences, &self.k1, &self.k2);
        c.labels = Some(self.labels.clone());
        c
    }

    /// Serializes as one JSON line, every number with 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(64 + 100 * self.len());
        s.push_str("{\"pair_id\":");
        push_string(&mut s, &self.pair_id);
        s.push_str(",\"k1\":");
        push_f64_array(&mut s, self.k1.as_array());
        s.push_str(",\"k2\":");
        push_f64_array(&mut s, self.k2.as_array());
        s.push_str(",\"r\":");
        push_f64_array(&mut s, self.rotation);
        s.push_str(",\"t\":");
        push_f64_array(&mut s, self.translation);
        s.push_str(",\"corrs\":");
        push_f64_array(&mut s, self.correspondences.iter().flatten().copied());
        s.push_str(",\"labels\":[");
        for (i, &l) in self.labels.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push(if l { '1' } else { '0' });
        }
        s.push_str("]}");
        s
    }

    /// Parses one JSON line; `line` is the 1-based position used in errors.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self, DataGenError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            pair_id: String,
            k1: Vec<f64>,
            k2: Vec<f64>,
            r: Vec<f64>,
            t: Vec<f64>,
            corrs: Vec<f64>,
            labels: Vec<u8>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| match e.classify() {
            Category::Data => DataGenError::Schema {
                line,
                message: e.to_string(),
            },
            _ => DataGenError::Parse {
                line,
                message: e.to_string(),
            },
        })?;
        let schema = |message: String| DataGenError::Schema { line, message };
        let intrinsics = |v: &[f64], name: &str| {
            if v.len() != 4 {
                return Err(schema(format!("{name} needs 4 values, got {}", v.len())));
            }
            CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| schema(format!("{name}: {e}")))
        };
        let k1 = intrinsics(&raw.k1, "k1")?;
        let k2 = intrinsics(&raw.k2, "k2")?;
        let rotation: [f64; 9] = raw
            .r
            .as_slice()
            .try_into()
            .map_err(|_| schema(format!("r needs 9 values, got {}", raw.r.len())))?;
        let translation: [f64; 3] = raw
            .t
            .as_slice()
            .try_into()
            .map_err(|_| schema(format!("t needs 3 values, got {}", raw.t.len())))?;
        if raw.corrs.len() != 4 * raw.labels.len() {
            return Err(schema(format!(
                "corrs has {} values for {} labels",
                raw.corrs.len(),
                raw.labels.len()
            )));
        }
        let labels = raw
            .labels
            .iter()
            .map(|&l| match l {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(schema(format!("label must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pair_id: raw.pair_id,
            k1,
            k2,
            rotation,
            translation,
            correspondences: raw.corrs.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            labels,
        })
    }
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), DataGenError> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| DataGenError::io(path, e))?);
    for r in records {
        writeln!(out, "{}", r.to_json_line()).map_err(|e| DataGenError::io(path, e))?;
    }
    out.flush().map_err(|e| DataGenError::io(path, e))
}

pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, DataGenError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| DatasetRecord::from_json_line(l, i + 1))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DataGenError> {
    let text = fs::read_to_string(path).map_err(|e| DataGenError::io(path, e))?;
    parse_dataset(&text)
}

impl DataGenError {
    pub(crate) fn io(path: &Path, e: io::Error) -> Self {
        DataGenError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
