use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn output(&self, name: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.path == name)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

fn missing(path: &Path, detail: impl Into<String>) -> Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads a stage's run manifest and checks that every `required` file is
/// present, listed, and unchanged.
pub fn verify_stage(dir: &Path, required: &[&str]) -> Result<RunManifest> {
    let mpath = dir.join(RUN_MANIFEST);
    let text =
        std::fs::read_to_string(&mpath).map_err(|_| missing(&mpath, "run manifest not found"))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| missing(&mpath, format!("unreadable run manifest: {e}")))?;
    for name in required {
        let path = dir.join(name);
        let listed = manifest
            .output(name)
            .ok_or_else(|| missing(&path, "not listed in the run manifest"))?;
        let actual = sha256_file(&path).map_err(|_| missing(&path, "file not found"))?;
        if actual != listed.sha256 {
            return Err(missing(
                &path,
                "content hash does not match the run manifest",
            ));
        }
    }
    Ok(manifest)
}

/// Collects a stage's outputs in a scratch directory and moves them into
/// place only on [`StageWriter::finish`]. Dropping an unfinished writer
/// removes the scratch directory.
pub struct StageWriter {
    dir: PathBuf,
    scratch: PathBuf,
    files: Vec<String>,
    done: bool,
}

impl StageWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("stage");
        let scratch = dir.with_file_name(format!(".{name}.partial"));
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch)?;
        }
        std::fs::create_dir_all(&scratch)?;
        Ok(StageWriter {
            dir: dir.to_path_buf(),
            scratch,
            files: Vec::new(),
            done: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Scratch path for output `name`, registering it for the manifest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.scratch.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents)?;
        Ok(self.dir.join(name))
    }

    pub fn finish(
        mut self,
        command: &str,
        config_hash: &str,
        seed: u64,
        inputs: Vec<FileHash>,
    ) -> Result<RunManifest> {
        let mut outputs = Vec::new();
        for f in &self.files {
            outputs.push(FileHash {
                path: f.clone(),
                sha256: sha256_file(&self.scratch.join(f))?,
            });
        }
        let manifest = RunManifest {
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            inputs,
            outputs,
        };
        std::fs::write(
            self.scratch.join(RUN_MANIFEST),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        std::fs::create_dir_all(&self.dir)?;
        for f in self.files.iter().map(String::as_str).chain([RUN_MANIFEST]) {
            std::fs::rename(self.scratch.join(f), self.dir.join(f))?;
        }
        std::fs::remove_dir_all(&self.scratch)?;
        self.done = true;
        Ok(manifest)
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finish_then_verify_then_tamper() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        let mut w = StageWriter::new(&dir).unwrap();
        w.write("a.txt", "hello").unwrap();
        w.finish("test", "abc", 1, vec![]).unwrap();
        assert!(verify_stage(&dir, &["a.txt"]).is_ok());
        std::fs::write(dir.join("a.txt"), "changed").unwrap();
        assert_eq!(verify_stage(&dir, &["a.txt"]).unwrap_err().exit_code(), 3);
        assert_eq!(
            verify_stage(&root.path().join("nope"), &["a.txt"])
                .unwrap_err()
                .exit_code(),
            3
        );
    }

    #[test]
    fn dropped_writer_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        {
            let mut w = StageWriter::new(&dir).unwrap();
            w.write("a.txt", "x").unwrap();
        }
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
