//! Synthetic two-view data: scenes, correspondence corruption (true matches
//! plus drift and re-pairing noise) and the `.jsonl` dataset format.

mod corrupt;
mod record;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use corrupt::{corrupt, NoiseConfig, INLIER_THRESHOLD};
pub use record::{parse_dataset, read_dataset, write_dataset, DatasetRecord};
pub use scene::{sample_scene, SceneConfig, ScenePair};

use crate::geometry::GeometryError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataGenError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("fewer than 8 inliers after {attempts} attempts")]
    InsufficientInliers { attempts: u64 },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Stable 64-bit FNV-1a hash, used to derive per-record random streams.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of stream `stream` for record `pair_id` under dataset seed `seed`.
pub fn derive_seed(seed: u64, pair_id: &str, stream: u64) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(pair_id.as_bytes());
    bytes.extend_from_slice(&stream.to_le_bytes());
    stable_hash(&bytes)
}

pub fn pair_id(index: usize) -> String {
    format!("pair_{index:06}")
}

/// Generates one record. Its randomness depends only on `(seed, pair_id)`.
pub fn generate_record(
    seed: u64,
    pair_id: &str,
    scene: &SceneConfig,
    noise: &NoiseConfig,
) -> Result<DatasetRecord, DataGenError> {
    noise.validate()?;
    let scene_cfg = SceneConfig {
        n_points: noise.n_total,
        ..*scene
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, pair_id, 0));
    let pair = sample_scene(&mut rng, &scene_cfg);
    let noise = NoiseConfig {
        seed: derive_seed(seed, pair_id, 1),
        ..*noise
    };
    corrupt(&pair, &noise, &scene_cfg, pair_id)
}

/// Generates `pairs` records in parallel; output order is by pair id and
/// identical to serial generation.
pub fn generate_dataset(
    seed: u64,
    pairs: usize,
    scene: &SceneConfig,
    noise: &NoiseConfig,
) -> Result<Vec<DatasetRecord>, DataGenError> {
    (0..pairs)
        .into_par_iter()
        .map(|i| generate_record(seed, &pair_id(i), scene, noise))
        .collect()
}
