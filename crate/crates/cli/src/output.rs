//! Provenance stanzas and write-once output handling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::error::CliError;

/// Format version of the files this tool writes.
pub const OUTPUT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub output_format: u32,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the resolved config serialized as JSON.
    pub config_sha256: String,
    pub config: CliConfig,
}

impl Provenance {
    pub fn new(command: &str, cfg: &CliConfig) -> Self {
        let canonical = serde_json::to_vec(cfg).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        Self {
            tool: "softdist",
            version: env!("CARGO_PKG_VERSION"),
            output_format: OUTPUT_FORMAT,
            command: command.to_string(),
            seed: cfg.seed,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config: cfg.clone(),
        }
    }

    fn value(&self) -> Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

/// Collects every file of a run and writes them only once all succeeded.
pub struct Outputs {
    force: bool,
    provenance: Provenance,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    /// Fails before any work starts if one of `paths` exists and `force` is off.
    pub fn plan(paths: &[PathBuf], force: bool, provenance: Provenance) -> Result<Self, CliError> {
        if !force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::Exists(p.clone()));
            }
        }
        Ok(Self {
            force,
            provenance,
            files: Vec::new(),
        })
    }

    /// JSON document with a `provenance` key added at the top level.
    pub fn json(&mut self, path: PathBuf, body: impl Serialize) -> Result<(), CliError> {
        let mut v = serde_json::to_value(body).map_err(softdist::Error::from)?;
        let obj = match v {
            Value::Object(ref mut m) => m,
            _ => return Err(CliError::Schema("JSON outputs must be objects".into())),
        };
        obj.insert("provenance".into(), self.provenance.value());
        let mut text = serde_json::to_string_pretty(&v).map_err(softdist::Error::from)?;
        text.push('\n');
        self.files.push((path, text.into_bytes()));
        Ok(())
    }

    /// CSV body preceded by a `# provenance` comment line.
    pub fn csv(&mut self, path: PathBuf, body: Vec<u8>) {
        let mut out = format!("# provenance {}\n", self.provenance.value()).into_bytes();
        out.extend(body);
        self.files.push((path, out));
    }

    /// Binary file plus a `<name>.provenance.json` sidecar.
    pub fn binary(&mut self, path: PathBuf, body: Vec<u8>) {
        let side = sidecar(&path);
        let mut text = serde_json::to_string_pretty(&self.provenance.value()).expect("serializes");
        text.push('\n');
        self.files.push((path, body));
        self.files.push((side, text.into_bytes()));
    }

    pub fn paths(&self) -> Vec<String> {
        self.files.iter().map(|(p, _)| p.display().to_string()).collect()
    }

    pub fn commit(self) -> Result<(), CliError> {
        for (path, bytes) in &self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            if !self.force && path.exists() {
                return Err(CliError::Exists(path.clone()));
            }
            let tmp = path.with_extension("partial");
            fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
        }
        Ok(())
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

/// Every planned binary output also claims its sidecar.
pub fn with_sidecars(paths: &[PathBuf]) -> Vec<PathBuf> {
    paths.iter().flat_map(|p| [p.clone(), sidecar(p)]).collect()
}
