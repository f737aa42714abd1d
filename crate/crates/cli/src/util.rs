//! Shared CLI plumbing: run manifests and small parsing helpers.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

pub struct RunContext {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Everything needed to re-run a command, written atomically next to every
/// output artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

pub struct ManifestBuilder {
    subcommand: String,
    started_at: String,
}

impl ManifestBuilder {
    pub fn start(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// Finish and write `<stem>.manifest.json` atomically (temp file in the
    /// same directory, then rename).
    pub fn write(
        self,
        ctx: &RunContext,
        stem: &str,
        config: serde_json::Value,
        outputs: &[String],
    ) -> Result<PathBuf, String> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config,
            seed: ctx.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            outputs: outputs.to_vec(),
        };
        let payload = serde_json::to_string_pretty(&manifest)
            .map_err(|e| format!("manifest serialization failed: {e}"))?;
        let path = ctx.path(&format!("{stem}.manifest.json"));
        write_atomic(&path, payload.as_bytes())?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| format!("cannot write {}: {e}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| format!("cannot move manifest into place at {}: {e}", path.display()))?;
    Ok(())
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Parse a comma-separated list.
pub fn parse_list<T: FromStr>(input: &str, what: &str) -> Result<Vec<T>, String> {
    input
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("invalid {what} entry '{s}'"))
        })
        .collect()
}
