//! One `run_manifest.v1` record per pipeline run.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use finer_core::client::ClientStats;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub replay: bool,
    /// File name to sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub endpoints: Vec<String>,
    pub client: ClientStats,
    pub wall_time_ms: u64,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_sha256: &str, seed: u64, replay: bool) -> Self {
        RunManifest {
            schema: "run_manifest.v1".into(),
            subcommand: subcommand.into(),
            config_sha256: config_sha256.into(),
            seed,
            replay,
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Digests every regular file in `dir` except the manifest itself.
    pub fn collect_outputs(&mut self, dir: &Path) -> io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            if name != MANIFEST_FILE && e.file_type()?.is_file() {
                self.outputs.insert(name, file_sha256(&e.path())?);
            }
        }
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
