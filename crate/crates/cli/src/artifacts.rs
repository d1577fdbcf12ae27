use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
/// Resolved configuration echoed next to the artifacts.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct ArtifactError {
    pub path: String,
    pub source: io::Error,
}

fn err(path: &Path) -> impl Fn(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: &'a str,
    files: Vec<FileEntry>,
}

/// Files one command writes under the output directory. On failure
/// [`Artifacts::rollback`] deletes them and any directory it created.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(root: &Path) -> Result<Self, ArtifactError> {
        let mut a = Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            dirs: Vec::new(),
        };
        a.ensure_dir(root)?;
        Ok(a)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<(), ArtifactError> {
        let mut missing = Vec::new();
        let mut d = Some(dir);
        while let Some(p) = d {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            missing.push(p.to_path_buf());
            d = p.parent();
        }
        fs::create_dir_all(dir).map_err(err(dir))?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Registers `rel` and returns its absolute path, creating parents.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf, ArtifactError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            self.ensure_dir(&parent.to_path_buf())?;
        }
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, ArtifactError> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(err(&p))?;
        Ok(p)
    }

    /// Writes the manifest: every registered file (except the config echo)
    /// with its size and SHA-256, sorted by relative path. Files listed by an
    /// earlier manifest in the same directory are kept if they still exist.
    pub fn finish(mut self, command: &str, seed: u64, config_hash: &str) -> Result<PathBuf, ArtifactError> {
        let mut rels: BTreeSet<String> = self
            .files
            .iter()
            .map(|p| {
                p.strip_prefix(&self.root)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/")
            })
            .collect();
        rels.extend(
            previous_files(&self.root.join(MANIFEST))
                .into_iter()
                .filter(|r| self.root.join(r).is_file()),
        );
        let mut files = Vec::new();
        for rel in rels {
            if rel == MANIFEST || rel == CONFIG_ECHO {
                continue;
            }
            let p = self.root.join(&rel);
            let data = fs::read(&p).map_err(err(&p))?;
            files.push(FileEntry {
                path: rel,
                bytes: data.len() as u64,
                sha256: hex::encode(Sha256::digest(&data)),
            });
        }
        let manifest = Manifest {
            command,
            seed,
            config_hash,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.write(MANIFEST, text)
    }

    /// Best-effort removal of everything this command wrote.
    pub fn rollback(self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn previous_files(manifest: &Path) -> Vec<String> {
    let Ok(text) = fs::read_to_string(manifest) else {
        return Vec::new();
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return Vec::new();
    };
    v["files"]
        .as_array()
        .map(|a| a.iter().filter_map(|f| f["path"].as_str().map(String::from)).collect())
        .unwrap_or_default()
}
