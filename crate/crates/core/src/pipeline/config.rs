use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::TttConfig;
use crate::corruptions::CorruptionKind;
use crate::error::{Error, Result};
use crate::meta::MetaConfig;

pub const BACKEND_ENV: &str = "TTT_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    /// A model served through the backend traits from another crate.
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toy" => Ok(Self::Toy),
            "external" => Ok(Self::External),
            other => Err(Error::config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Where images come from. With neither path set the built-in toy world is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub images_dir: Option<PathBuf>,
    pub toy_world_path: Option<PathBuf>,
    pub annotations_path: Option<PathBuf>,
    /// Keep only these ids, in this order.
    pub ids: Option<Vec<String>>,
    /// Keep at most this many images after id filtering.
    pub limit: Option<usize>,
    /// Skip this many images before applying `limit`.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionChoice {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub ttt: TttConfig,
    pub meta: MetaConfig,
    pub meta_init_path: Option<PathBuf>,
    /// Each image is adapted once per entry; empty means clean images only.
    pub corruptions: Vec<CorruptionChoice>,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
    /// Run directory name under `output_dir`; defaults to `run-<unix seconds>`.
    pub run_name: Option<String>,
    pub workers: usize,
    pub global_seed: u64,
    /// Bin edges (display units) for the score report.
    pub score_bins: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Toy,
            ttt: TttConfig::default(),
            meta: MetaConfig::default(),
            meta_init_path: None,
            corruptions: Vec::new(),
            dataset: DatasetConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_name: None,
            workers: 1,
            global_seed: 0,
            score_bins: (0..=20).map(|i| f64::from(i) * 5.0).collect(),
        }
    }
}

impl RunConfig {
    /// Toy-backend defaults with step sizes suited to its tiny adapter.
    pub fn toy() -> Self {
        Self {
            ttt: TttConfig::toy(),
            meta: MetaConfig::toy(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if self.dataset.images_dir.is_some() && self.dataset.toy_world_path.is_some() {
            return Err(Error::config("set only one of dataset.images_dir and dataset.toy_world_path"));
        }
        if self.backend == BackendKind::External {
            return Err(Error::config(
                "the external backend is not linked into this build; implement GeneratorBackend and \
                 EncoderBackend and call the library directly",
            ));
        }
        if let Some(name) = &self.run_name {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::config("run_name must be a plain directory name"));
            }
        }
        for c in &self.corruptions {
            crate::corruptions::CorruptionSpec::new(c.kind, c.severity, 0)?;
        }
        self.ttt.validate()?;
        self.meta.validate()
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::toy();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let sparse: RunConfig = toml::from_str("workers = 2\n[ttt]\niterations = 5\nregen_interval = 5\n").unwrap();
        assert_eq!(sparse.workers, 2);
        assert_eq!(sparse.ttt.iterations, 5);
        assert_eq!(sparse.ttt.n_candidates, 16);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::toy();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.dataset.images_dir = Some("a".into());
        c.dataset.toy_world_path = Some("b".into());
        assert!(c.validate().is_err());
        let c = RunConfig {
            backend: BackendKind::External,
            ..RunConfig::toy()
        };
        assert!(c.validate().is_err());
    }
}
