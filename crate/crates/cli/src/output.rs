//! Artifact files, atomic writes and the content-hash manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file: String,
    pub producer: &'static str,
    pub contents: String,
}

impl Artifact {
    pub fn new(file: &str, producer: &'static str, contents: String) -> Self {
        Self {
            file: file.to_string(),
            producer,
            contents,
        }
    }

    pub fn json<T: Serialize>(file: &str, producer: &'static str, value: &T) -> Self {
        let mut contents = serde_json::to_string_pretty(value).expect("artifact serializes");
        contents.push('\n');
        Self::new(file, producer, contents)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub hash: String,
    pub producer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn build(experiment: &str, seed: u64, artifacts: &[Artifact]) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            files: artifacts
                .iter()
                .map(|a| ManifestEntry {
                    file: a.file.clone(),
                    bytes: a.contents.len() as u64,
                    hash: sha256_hex(a.contents.as_bytes()),
                    producer: a.producer.to_string(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Verify(format!("{}: {e}", path.display())))
    }
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

/// Writes every artifact, then the manifest last so a complete manifest
/// implies complete outputs.
pub fn write_outputs(dir: &Path, manifest: &Manifest, artifacts: &[Artifact]) -> CliResult<()> {
    for a in artifacts {
        write_atomic(&dir.join(&a.file), a.contents.as_bytes())?;
    }
    write_atomic(&dir.join(MANIFEST), manifest.to_json().as_bytes())
}
