//! Run persistence: one directory per run holding `run.json` plus one
//! sub-directory per artifact. Each artifact directory contains a JSON
//! `manifest.json` and raw tensor files (see [`tensor`]). The manifest is
//! written last, so its presence marks a complete artifact.

mod run;
pub mod tensor;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use run::{RunRecord, StageFlags, STAGES};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub meta: serde_json::Value,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>, kind: &str) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        // A stale manifest must not vouch for half-rewritten tensors.
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        Ok(Self {
            dir,
            manifest: Manifest {
                kind: kind.to_string(),
                version: tensor::VERSION,
                tensors: BTreeMap::new(),
                meta: serde_json::Value::Null,
            },
        })
    }

    pub fn tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let file = format!("{name}.bin");
        write_tensor(&self.dir.join(&file), tensor)?;
        self.manifest.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                dtype: tensor.dtype(),
                shape: tensor.shape.clone(),
            },
        );
        Ok(())
    }

    pub fn meta<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.manifest.meta = serde_json::to_value(value)?;
        Ok(())
    }

    /// Side file stored verbatim next to the manifest (e.g. a JSON report).
    pub fn file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.dir.join(name), bytes)
    }

    pub fn finish(self) -> Result<PathBuf> {
        write_json(&self.dir.join(MANIFEST), &self.manifest)?;
        Ok(self.dir)
    }
}

pub struct ArtifactReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactReader {
    pub fn open(dir: impl Into<PathBuf>, kind: &str) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::NotFound(format!("artifact {}", dir.display())));
        }
        let manifest: Manifest = read_json(&path)?;
        if manifest.kind != kind {
            return Err(Error::integrity(
                path,
                0,
                format!("artifact kind '{}' where '{kind}' was expected", manifest.kind),
            ));
        }
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Reads a tensor and checks its header against the manifest.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("tensor '{name}' in {}", self.dir.display())))?;
        let path = self.dir.join(&entry.file);
        let t = read_tensor(&path)?;
        if t.dtype() != entry.dtype {
            return Err(Error::integrity(path, 8, "dtype disagrees with manifest"));
        }
        if t.shape != entry.shape {
            return Err(Error::integrity(path, 13, "shape disagrees with manifest"));
        }
        Ok(t)
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.meta.clone())?)
    }

    pub fn file(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::Io(e),
        })
    }
}

/// A payload that can be persisted as a manifest plus tensors.
pub trait Artifact: Sized {
    const KIND: &'static str;
    fn write(&self, w: &mut ArtifactWriter) -> Result<()>;
    fn read(r: &ArtifactReader) -> Result<Self>;
}

/// Root directory holding one sub-directory per run, named by run id.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn create_run(&self, config: serde_json::Value) -> Result<RunRecord> {
        let record = RunRecord::new(config);
        fs::create_dir_all(self.run_dir(&record.run_id))?;
        self.save_run(&record)?;
        Ok(record)
    }

    pub fn save_run(&self, record: &RunRecord) -> Result<()> {
        record.flags.validate()?;
        write_json(&self.run_dir(&record.run_id).join(RUN_FILE), record)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunRecord> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::NotFound(format!("run '{run_id}'")));
        }
        let path = self.run_dir(run_id).join(RUN_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("run '{run_id}'")));
        }
        read_json(&path)
    }

    /// All runs under the root, oldest first (run ids are ULIDs).
    pub fn list_runs(&self) -> Result<Vec<RunRecord>> {
        let mut runs = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(runs),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let path = entry?.path().join(RUN_FILE);
            if path.exists() {
                runs.push(read_json::<RunRecord>(&path)?);
            }
        }
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(runs)
    }

    pub fn latest_run(&self) -> Result<RunRecord> {
        self.list_runs()?
            .pop()
            .ok_or_else(|| Error::NotFound(format!("no runs under {}", self.root.display())))
    }

    pub fn artifact_dir(&self, run_id: &str, kind: &str) -> PathBuf {
        self.run_dir(run_id).join(kind)
    }

    pub fn write_artifact<A: Artifact>(&self, run_id: &str, kind: &str, payload: &A) -> Result<PathBuf> {
        let mut w = ArtifactWriter::new(self.artifact_dir(run_id, kind), A::KIND)?;
        payload.write(&mut w)?;
        w.finish()
    }

    pub fn read_artifact<A: Artifact>(&self, run_id: &str, kind: &str) -> Result<A> {
        let r = ArtifactReader::open(self.artifact_dir(run_id, kind), A::KIND)?;
        A::read(&r)
    }

    pub fn has_artifact(&self, run_id: &str, kind: &str) -> bool {
        self.artifact_dir(run_id, kind).join(MANIFEST).exists()
    }
}
