use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one run. Written to `manifest.json` in the output directory
/// whether or not the run succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub started_unix: u64,
    pub timings: Vec<PhaseTiming>,
    pub outputs: Vec<OutputFile>,
    pub exit_code: i32,
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory plus the manifest being assembled.
pub struct RunContext {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunContext {
    pub fn new(out_dir: PathBuf, subcommand: &str, seed: Option<u64>, threads: usize) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunContext {
            out_dir,
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: serde_json::Value::Null,
                seed,
                threads,
                started_unix,
                timings: Vec::new(),
                outputs: Vec::new(),
                exit_code: 0,
                error: None,
            },
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.manifest.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.manifest.timings.push(PhaseTiming {
            phase: phase.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn ensure_dir(&self) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    /// Renders `name` into memory, writes it and records its hash.
    pub fn write_output<E>(
        &mut self,
        name: &str,
        render: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<PathBuf, Failure>
    where
        Failure: From<E>,
    {
        self.ensure_dir()?;
        let mut bytes = Vec::new();
        render(&mut bytes)?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, &bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        self.write_output(name, |buf| {
            serde_json::to_writer_pretty(&mut *buf, value)?;
            buf.push(b'\n');
            Ok::<(), serde_json::Error>(())
        })
    }

    pub fn finish(mut self, result: &Result<(), Failure>) -> Result<PathBuf, Failure> {
        self.manifest.exit_code = match result {
            Ok(()) => 0,
            Err(f) => f.exit_code(),
        };
        self.manifest.error = result.as_ref().err().map(|f| f.to_string());
        self.ensure_dir()?;
        let path = self.out_dir.join("manifest.json");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&path)?);
            serde_json::to_writer_pretty(&mut w, &self.manifest)?;
            w.write_all(b"\n")?;
            w.flush()
        };
        write().map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Checks every output listed in a manifest against its recorded hash.
pub fn verify_manifest(out_dir: &Path) -> Result<RunManifest, Failure> {
    let text = std::fs::read_to_string(out_dir.join("manifest.json"))
        .map_err(|e| Failure::Runtime(format!("cannot read manifest: {e}")))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("invalid manifest: {e}")))?;
    for o in &manifest.outputs {
        let bytes = std::fs::read(out_dir.join(&o.path))
            .map_err(|e| Failure::Runtime(format!("missing output {}: {e}", o.path)))?;
        if sha256_hex(&bytes) != o.sha256 {
            return Err(Failure::Runtime(format!("hash mismatch for {}", o.path)));
        }
    }
    Ok(manifest)
}
