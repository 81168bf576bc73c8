//! Run configuration: a sectioned TOML document whose values command-line
//! flags may override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::recommender::{Method, RecConfig};
use crate::trainer::TrainConfig;

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
pub const DEFAULT_WD_GRID: [f64; 2] = [1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding a canonical dataset.
    pub path: Option<PathBuf>,
    pub name: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, name: "dataset".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub k: usize,
    /// Select the stage-two learning rate and weight decay on validation NDCG.
    pub tune: bool,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::Lcdr,
            seeds: (0..10).collect(),
            k: 5,
            tune: false,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            wd_grid: DEFAULT_WD_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub recommender: RecConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.recommender.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.run.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.run.tune && (self.run.lr_grid.is_empty() || self.run.wd_grid.is_empty()) {
            return Err(Error::config("tuning needs non-empty lr and wd grids"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex_prefix(&digest, 8)
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let c = RunConfig::from_toml(
            "[train]\nlambda = 0.1\n\n[recommender]\nd_mf = 16\n\n[run]\nmethod = \"mf_wf\"\nseeds = [1, 2]\n",
        )
        .unwrap();
        assert_eq!(c.train.lambda, 0.1);
        assert_eq!(c.train.latent_dim, 4);
        assert_eq!(c.recommender.d_mf, 16);
        assert_eq!(c.run.method, Method::MfWf);
        assert_eq!(c.run.seeds, vec![1, 2]);
        assert_eq!(c.run.k, 5);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::from_toml("[train]\nlamda = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[run]\nmethod = \"bpr\"\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let back = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut c = RunConfig::default();
        c.run.seeds.clear();
        assert!(c.validate().is_err());
    }
}
