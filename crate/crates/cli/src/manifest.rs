use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::plan::Plan;

pub const TOOL_VERSION: &str = concat!("diffract ", env!("CARGO_PKG_VERSION"));

/// File name of the manifest inside an output directory.
pub const DIR_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command run, stored next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    #[serde(flatten)]
    pub plan: Plan,
    pub seed: Option<u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::format(path, e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// `out.dfrct` → `out.dfrct.manifest.json`; directories hold `manifest.json`.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join(DIR_MANIFEST)
    } else {
        sidecar(output, "manifest.json")
    }
}

/// `path` with `.suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// SHA-256 of a file, or for a directory of every file in it except its
/// manifest, visited in name order.
pub fn digest_path(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(path, e))?;
        names.sort();
        for name in names.into_iter().filter(|n| n != DIR_MANIFEST) {
            let file = path.join(&name);
            let bytes = std::fs::read(&file).map_err(|e| CliError::io(&file, e))?;
            h.update(name.as_encoded_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn record_inputs(paths: &[PathBuf]) -> CliResult<Vec<InputRecord>> {
    paths.iter().map(|p| Ok(InputRecord { path: p.clone(), sha256: digest_path(p)? })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_names() {
        assert_eq!(manifest_path(Path::new("a/b.dfrct"), false), PathBuf::from("a/b.dfrct.manifest.json"));
        assert_eq!(manifest_path(Path::new("out"), true), PathBuf::from("out/manifest.json"));
        assert_eq!(sidecar(Path::new("ckpt"), "metrics.jsonl"), PathBuf::from("ckpt.metrics.jsonl"));
    }

    #[test]
    fn directory_digest_ignores_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"1").unwrap();
        let before = digest_path(dir.path()).unwrap();
        std::fs::write(dir.path().join(DIR_MANIFEST), b"{}").unwrap();
        assert_eq!(digest_path(dir.path()).unwrap(), before);
        std::fs::write(dir.path().join("a"), b"2").unwrap();
        assert_ne!(digest_path(dir.path()).unwrap(), before);
    }
}
