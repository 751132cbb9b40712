// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output directory handling: exclusive lock, artifact digests and run
//! manifests.
//!
//! Artifacts are addressed by paths relative to the output directory. JSON
//! artifacts are digested after dropping every `wall_secs` field, so that a
//! rerun with the same config reproduces every recorded digest even though
//! timings differ.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mindpatch::digest::Digest;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const ARTIFACT_VERSION: u32 = 1;
const LOCK_NAME: &str = ".mindpatch.lock";
const MANIFEST_DIR: &str = "manifests";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub command: String,
    /// Full configuration after command-line overrides.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, Digest>,
    pub outputs: BTreeMap<String, Digest>,
    pub notes: Vec<String>,
    pub wall_secs: f64,
}

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_secs");
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// Content digest of an artifact file (timing fields of JSON excluded).
pub fn artifact_digest(path: &Path) -> Result<Digest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: Value = serde_json::from_slice(&bytes)?;
        strip_timings(&mut v);
        return Ok(Digest::of_bytes(&serde_json::to_vec(&v)?));
    }
    Ok(Digest::of_bytes(&bytes))
}

#[derive(Debug)]
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Contract(format!(
                "{} is in use by another run (delete {LOCK_NAME} if it is stale)",
                dir.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An output directory held exclusively for the lifetime of the value.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    _lock: Lock,
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = Lock::acquire(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    fn ensure_parent(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(p)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<(), CliError> {
        let p = self.ensure_parent(rel)?;
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    pub fn read_text(&self, rel: &str) -> Result<String, CliError> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    }

    /// Path for a file written by code outside this module (checkpoints,
    /// JSONL), with its directory created.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf, CliError> {
        self.ensure_parent(rel)
    }

    pub fn manifest_rel(command: &str) -> String {
        format!("{MANIFEST_DIR}/{command}.json")
    }

    pub fn manifests(&self) -> Result<Vec<RunManifest>, CliError> {
        let dir = self.path(MANIFEST_DIR);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }

    pub fn manifest(&self, command: &str) -> Result<Option<RunManifest>, CliError> {
        let rel = Self::manifest_rel(command);
        if !self.exists(&rel) {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&self.read_text(&rel)?)?))
    }

    /// Digest of an input artifact, checked against whichever manifest in
    /// this directory recorded it as an output.
    pub fn verify(&self, rel: &str) -> Result<Digest, CliError> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(CliError::Contract(format!("missing input artifact {}", p.display())));
        }
        let actual = artifact_digest(&p)?;
        for m in self.manifests()? {
            if let Some(recorded) = m.outputs.get(rel) {
                if *recorded != actual {
                    return Err(CliError::Contract(format!(
                        "{rel} does not match the digest recorded by `{}` ({} vs {})",
                        m.command, actual, recorded
                    )));
                }
            }
        }
        Ok(actual)
    }
}

/// Bookkeeping for one command invocation.
#[derive(Debug)]
pub struct Recorder {
    command: String,
    started: Instant,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, Digest>,
    outputs: BTreeMap<String, Digest>,
    notes: Vec<String>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            started: Instant::now(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_owned(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Verifies an input and returns its absolute path.
    pub fn input(&mut self, store: &Store, rel: &str) -> Result<PathBuf, CliError> {
        let d = store.verify(rel)?;
        self.inputs.insert(rel.to_owned(), d);
        Ok(store.path(rel))
    }

    /// Records an output that has been written.
    pub fn output(&mut self, store: &Store, rel: &str) -> Result<(), CliError> {
        let d = artifact_digest(&store.path(rel))?;
        self.outputs.insert(rel.to_owned(), d);
        Ok(())
    }

    pub fn finish(self, store: &Store, config: Value) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            artifact_version: ARTIFACT_VERSION,
            command: self.command,
            config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            notes: self.notes,
            wall_secs: self.started.elapsed().as_secs_f64(),
        };
        store.write_json(&Store::manifest_rel(&m.command), &m)?;
        Ok(m)
    }
}
