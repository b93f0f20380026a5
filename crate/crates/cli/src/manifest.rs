//! Run manifests: what a command was given, what it wrote, and how long
//! each stage took.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector; replaying it in `workdir` reproduces the outputs.
    pub args: Vec<String>,
    pub tool_version: String,
    pub workdir: PathBuf,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub stages: Vec<StageTime>,
}

pub struct Recorder {
    manifest: RunManifest,
    stage_start: Instant,
}

impl Recorder {
    pub fn new(command: &str, workdir: &Path, seed: Option<u64>, threads: usize) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                workdir: workdir.to_path_buf(),
                seed,
                threads,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                stages: Vec::new(),
            },
            stage_start: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.manifest.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    }

    /// Closes the running stage under `name` and starts the next one.
    pub fn stage(&mut self, name: &str) {
        self.manifest.stages.push(StageTime {
            stage: name.to_string(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        self.stage_start = Instant::now();
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.manifest.inputs.push(artifact(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.manifest.outputs.push(artifact(path)?);
        Ok(())
    }

    /// Writes the manifest via a temporary file and rename.
    pub fn finish(self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn artifact(path: &Path) -> std::io::Result<Artifact> {
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}
