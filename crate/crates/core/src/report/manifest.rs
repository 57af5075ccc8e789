use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{GeneratorConfig, RunConfig, SuiteSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Suite,
    GenData,
}

/// Artifact locations, relative to the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub metrics: Option<String>,
    pub feature_grads: Option<String>,
    pub summary: Option<String>,
    pub aggregates: Option<String>,
    pub report: Option<String>,
    pub samples: Option<String>,
    pub cells_dir: Option<String>,
    pub plots: Vec<String>,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub kind: RunKind,
    pub tool_version: String,
    pub run: RunConfig,
    pub generator: GeneratorConfig,
    pub suite: Option<SuiteSpec>,
    pub seeds: Vec<u64>,
    /// Only used by `gen-data`.
    pub sample_count: Option<usize>,
    pub outputs: OutputPaths,
}

#[derive(Serialize)]
struct IdInput<'a> {
    kind: RunKind,
    run: &'a RunConfig,
    generator: &'a GeneratorConfig,
    suite: &'a Option<SuiteSpec>,
    seeds: &'a [u64],
    sample_count: Option<usize>,
}

impl ExperimentManifest {
    /// Builds a manifest whose id is a hash of the configuration.
    pub fn new(
        kind: RunKind,
        run: RunConfig,
        generator: GeneratorConfig,
        suite: Option<SuiteSpec>,
        sample_count: Option<usize>,
    ) -> Result<Self> {
        let seeds = match &suite {
            Some(s) => s.seeds.clone(),
            None => vec![run.seed],
        };
        let mut m = Self {
            run_id: String::new(),
            kind,
            tool_version: TOOL_VERSION.to_string(),
            run,
            generator,
            suite,
            seeds,
            sample_count,
            outputs: OutputPaths::default(),
        };
        m.run_id = m.compute_id()?;
        Ok(m)
    }

    /// First 16 hex digits of SHA-256 over the canonical configuration JSON.
    pub fn compute_id(&self) -> Result<String> {
        let input = IdInput {
            kind: self.kind,
            run: &self.run,
            generator: &self.generator,
            suite: &self.suite,
            seeds: &self.seeds,
            sample_count: self.sample_count,
        };
        let digest = Sha256::digest(serde_json::to_vec(&input)?);
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks that its id still matches its content.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_json(&text)?;
        if m.compute_id()? != m.run_id {
            return Err(Error::InvalidState(format!(
                "manifest {} has run id {} but its configuration hashes differently",
                path.display(),
                m.run_id
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.generator.validate()
    }
}
