use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fbsdelab::io::{write_json, IoError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the config file bytes, if one was given.
    pub config_hash: Option<String>,
    pub seed: u64,
    /// Flags of the subcommand, as parsed.
    pub arguments: serde_json::Value,
    pub versions: Versions,
    /// Artifacts written by this run, relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock: WallClock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub fbsdelab: String,
    pub fbsdelab_cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            fbsdelab: fbsdelab::VERSION.to_string(),
            fbsdelab_cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn write(dir: &Path, manifest: &RunManifest) -> Result<(), IoError> {
    write_json(&dir.join(MANIFEST), manifest)
}
