//! `harmonkit.toml`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

pub const DEFAULT_PORT: u16 = 8737;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    /// Vocabulary used when a session is created without one.
    pub vocab: Option<PathBuf>,
    pub provenance_dir: PathBuf,
    /// Bind address.
    pub host: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            vocab: None,
            provenance_dir: PathBuf::from("provenance"),
            host: "127.0.0.1".into(),
        }
    }
}

impl ServerConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: ServerConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.provenance_dir.is_relative() {
            cfg.provenance_dir = base.join(&cfg.provenance_dir);
        }
        if let Some(v) = cfg.vocab.as_mut().filter(|v| v.is_relative()) {
            *v = base.join(&*v);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("harmonkit.toml");
        std::fs::write(&p, "port = 9000\nvocab = \"gdc.json\"\nprovenance_dir = \"prov\"\n").unwrap();
        let cfg = ServerConfig::load(&p).unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.vocab, Some(dir.path().join("gdc.json")));
        assert_eq!(cfg.provenance_dir, dir.path().join("prov"));
        std::fs::write(&p, "prot = 1\n").unwrap();
        assert!(ServerConfig::load(&p).is_err());
    }
}
