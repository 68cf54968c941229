use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Parse a TOML or JSON config, chosen by extension. Unknown keys are errors
/// when the target type denies them.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
        _ => return Err(usage(format!("{}: config must be .toml or .json", path.display()))),
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    path.map(load_config).transpose().map(Option::unwrap_or_default)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of the effective config's canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("serializable config");
    sha256_hex(value.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        alpha: f64,
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "alpha = 0.5\n").unwrap();
        std::fs::write(dir.path().join("a.json"), "{\"alpha\": 0.5}").unwrap();
        let a: Demo = load_config(&dir.path().join("a.toml")).unwrap();
        let b: Demo = load_config(&dir.path().join("a.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "alpha = 0.5\nbeta = 1\n").unwrap();
        let err = load_config::<Demo>(&dir.path().join("a.toml")).unwrap_err();
        assert!(err.is::<UsageError>());
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn config_hash_is_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str("{\"a\":1,\"b\":2}").unwrap();
        let b: serde_json::Value = serde_json::from_str("{\"b\":2,\"a\":1}").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }
}
