use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unims::{Error, Result, RunConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Enough to re-run a command: its arguments plus the configuration they
/// resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub data: Vec<PathBuf>,
    pub teacher: String,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
