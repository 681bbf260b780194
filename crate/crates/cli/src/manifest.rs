//! Per-directory run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Version string embedded in every manifest.
pub fn version() -> String {
    match option_env!("NESTDIFF_GIT_REV") {
        Some(rev) => format!("v{}-g{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved settings, after defaults and overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub version: String,
    pub started_at: f64,
    pub finished_at: Option<f64>,
}

/// A manifest tied to its output directory; rewritten in place as artifacts
/// appear so the directory always holds exactly one.
pub struct ManifestWriter {
    dir: PathBuf,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    /// Create `dir` and write the initial manifest before any work happens.
    pub fn start(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> nestdiff::Result<Self> {
        fs::create_dir_all(dir)?;
        let w = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                artifacts: Vec::new(),
                version: version(),
                started_at: now(),
                finished_at: None,
            },
        };
        w.write()?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record an artifact (relative to the directory) once.
    pub fn artifact(&mut self, name: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
    }

    pub fn finish(mut self) -> nestdiff::Result<()> {
        self.manifest.finished_at = Some(now());
        self.write()
    }

    fn write(&self) -> nestdiff::Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
