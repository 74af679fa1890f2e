//! Run manifests: every subcommand echoes its fully resolved configuration
//! (defaults included) plus input digests, and every output file carries
//! the manifest hash, so a run can be reproduced byte for byte from its
//! manifest.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub resolved: serde_json::Value,
    pub input_sha256: Option<String>,
    pub manifest_hash: String,
}

impl Manifest {
    pub fn new(
        command: &str,
        resolved: serde_json::Value,
        input: Option<&Path>,
    ) -> Result<Self> {
        let input_sha256 = match input {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .with_context(|| format!("reading input {}", path.display()))?;
                Some(hex(&Sha256::digest(&bytes)))
            }
            None => None,
        };
        let canonical = serde_json::to_string(&serde_json::json!({
            "tool": "coxsurf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "resolved": resolved,
            "input_sha256": input_sha256,
        }))?;
        let manifest_hash = hex(&Sha256::digest(canonical.as_bytes()));
        Ok(Self {
            tool: "coxsurf",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            resolved,
            input_sha256,
            manifest_hash,
        })
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
