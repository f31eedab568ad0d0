//! Run provenance. The hash covers what determines the outputs (tool
//! version, subcommand, resolved config, seed, units and input file
//! contents) but not file system paths.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const TOOL: &str = concat!("dismi ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub subcommand: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub units: &'static str,
    pub config: Value,
    /// SHA-256 of each input file's bytes, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config_path: Option<String>,
        seed: Option<u64>,
        out: Option<String>,
        units: &'static str,
        config: Value,
        inputs: BTreeMap<String, String>,
    ) -> Self {
        // serde_json objects keep keys sorted, so this text is canonical
        let content = json!({
            "tool": TOOL,
            "subcommand": subcommand,
            "seed": seed,
            "units": units,
            "config": config,
            "inputs": inputs,
        });
        let hash = sha256_hex(content.to_string().as_bytes());
        RunManifest {
            tool: TOOL,
            subcommand: subcommand.to_string(),
            config_path,
            seed,
            out,
            units,
            config,
            inputs,
            hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths() {
        let a = RunManifest::new("train", Some("a.toml".into()), Some(1), Some("x".into()), "nats", json!({"k": 1}), BTreeMap::new());
        let b = RunManifest::new("train", Some("b.toml".into()), Some(1), Some("y".into()), "nats", json!({"k": 1}), BTreeMap::new());
        assert_eq!(a.hash, b.hash);
        let c = RunManifest::new("train", None, Some(2), None, "nats", json!({"k": 1}), BTreeMap::new());
        assert_ne!(a.hash, c.hash);
        assert_eq!(a.hash.len(), 64);
    }
}
