use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{GeneratorConfig, RunConfig};

pub const OUT_DIR_ENV: &str = "MDACL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Contents of a TOML configuration file: `[run]` and `[generator]` tables,
/// each optional and each falling back to the built-in defaults per key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub generator: GeneratorConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// `flag`, else `$MDACL_OUT_DIR`, else `runs`.
pub fn resolve_out_root(flag: Option<&Path>) -> PathBuf {
    resolve_out_root_from(flag, env::var_os(OUT_DIR_ENV).map(PathBuf::from))
}

fn resolve_out_root_from(flag: Option<&Path>, env_value: Option<PathBuf>) -> PathBuf {
    match (flag, env_value) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(e)) if !e.as_os_str().is_empty() => e,
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::WeightingStrategy;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ConfigFile::parse("[run]\nsteps = 7\nstrategy = \"forward\"\n[generator]\nnoise_b = 0.2\n").unwrap();
        assert_eq!(c.run.steps, 7);
        assert_eq!(c.run.strategy, WeightingStrategy::Forward);
        assert_eq!(c.run.lr, RunConfig::default().lr);
        assert_eq!(c.generator.noise_b, 0.2);
        assert_eq!(c.generator.height, GeneratorConfig::default().height);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ConfigFile::parse("").unwrap(), ConfigFile::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("[run]\nstepz = 7\n").is_err());
        assert!(ConfigFile::parse("[other]\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ConfigFile {
            run: RunConfig::full(),
            generator: GeneratorConfig::a_dominant(),
        };
        assert_eq!(ConfigFile::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn out_root_precedence() {
        let flag = Path::new("/flag");
        let env = Some(PathBuf::from("/env"));
        assert_eq!(resolve_out_root_from(Some(flag), env.clone()), PathBuf::from("/flag"));
        assert_eq!(resolve_out_root_from(None, env), PathBuf::from("/env"));
        assert_eq!(resolve_out_root_from(None, Some(PathBuf::new())), PathBuf::from(DEFAULT_OUT_DIR));
        assert_eq!(resolve_out_root_from(None, None), PathBuf::from(DEFAULT_OUT_DIR));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(ConfigFile::load(Path::new("/no/such/file.toml")), Err(Error::Io { .. })));
    }
}
