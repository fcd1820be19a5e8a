//! Output staging and the per-run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'a str,
    mode: &'a str,
    seeds: &'a [u64],
    config_sha256: &'a str,
    inputs: &'a [FileDigest],
    outputs: Vec<FileDigest>,
}

/// Files held in memory until the command has finished, then written in one
/// go together with `manifest.json`.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<FileDigest>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            files: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Adds a file produced by a writer callback.
    pub fn add_with<E>(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<(), CliError>
    where
        E: std::fmt::Display,
    {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        self.add(name, buf);
        Ok(())
    }

    pub fn record_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn commit(
        self,
        command: &str,
        mode: &str,
        seeds: &[u64],
        config_sha256: &str,
    ) -> Result<(), CliError> {
        let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
        std::fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let mut digests = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| io(&path, e))?;
            digests.push(FileDigest {
                name: name.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: pgeigen::VERSION,
            command,
            mode,
            seeds,
            config_sha256,
            inputs: &self.inputs,
            outputs: digests,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn nothing_is_written_before_commit() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut out = Outputs::new(dir.clone());
        out.add("a.csv", b"x\n1\n".to_vec());
        assert!(!dir.exists());
        out.commit("train", "cophy", &[0], "00").unwrap();
        assert_eq!(std::fs::read(dir.join("a.csv")).unwrap(), b"x\n1\n");
        let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
        assert!(manifest.contains(&sha256_hex(b"x\n1\n")));
    }
}
