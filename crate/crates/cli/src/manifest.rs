use crate::error::CliResult;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Contents depend on wall-clock time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub volatile: bool,
}

impl Artifact {
    pub fn of(path: &Path) -> CliResult<Artifact> {
        let bytes = fs::read(path).map_err(|e| crate::error::CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
            volatile: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: Value) -> Self {
        ExperimentManifest {
            run_id: String::new(),
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn volatile_output(&mut self, path: &Path) -> CliResult<()> {
        let mut a = Artifact::of(path)?;
        a.volatile = true;
        self.outputs.push(a);
        Ok(())
    }

    pub fn time(&mut self, name: &str, secs: f64) {
        self.timings.insert(name.into(), secs);
    }

    /// Digest over the command, config and every non-volatile artifact
    /// digest. Paths and timings are excluded.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update([0]);
        h.update(strip_paths(&self.config).to_string().as_bytes());
        for (tag, list) in [("in", &self.inputs), ("out", &self.outputs)] {
            for a in list.iter().filter(|a| !a.volatile) {
                h.update(tag.as_bytes());
                h.update(a.sha256.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fills `run_id` and appends one line to `dir/manifest.jsonl`.
    pub fn append(mut self, dir: &Path) -> CliResult<PathBuf> {
        self.run_id = self.content_digest()[..16].to_string();
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        writeln!(f, "{}", serde_json::to_string(&self)?)?;
        Ok(path)
    }
}

fn strip_paths(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| k.as_str() != "paths")
                .map(|(k, v)| (k.clone(), strip_paths(v)))
                .collect(),
        ),
        other => other.clone(),
    }
}

pub fn read_manifests(path: &Path) -> CliResult<Vec<ExperimentManifest>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
