// SPDX-License-Identifier: MIT OR Apache-2.0

//! `run_meta.json`: one entry per subcommand, enough to re-run it.

use std::collections::BTreeMap;
use std::path::Path;

use latent_lens::fsutil::{read_json, write_json_atomic};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts;
use crate::config::Effective;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    /// SHA-256 of `config_toml`.
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    /// Effective configuration with all flags applied; pass it back with
    /// `--config` to repeat the step.
    pub config_toml: String,
}

pub fn config_toml(eff: &Effective) -> Result<String, CliError> {
    toml::to_string(&eff.config).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn record(eff: &Effective, command: &str, seconds: f64) -> Result<(), CliError> {
    let path = eff.out.join(artifacts::RUN_META);
    let mut all: BTreeMap<String, RunMeta> = if path.is_file() {
        read_json(&path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let toml = config_toml(eff)?;
    let versions = BTreeMap::from([
        ("latent-lens".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
        ("run_meta".to_owned(), "1".to_owned()),
    ]);
    all.insert(
        command.to_owned(),
        RunMeta {
            command: command.to_owned(),
            config_hash: hash_hex(toml.as_bytes()),
            seed: eff.seed,
            versions,
            wall_clock_seconds: seconds,
            config_toml: toml,
        },
    );
    write_json_atomic(&path, &all)?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}
