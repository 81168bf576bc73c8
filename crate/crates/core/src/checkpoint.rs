//! Versioned JSON checkpoints for both stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivae::IvaeModel;
use crate::lcvae::LcvaeModel;
use crate::recommender::{Method, Recommender};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub ivae: Option<IvaeModel>,
    /// Exposure VAE; trained without alignment for the unconstrained variants.
    pub lcvae: Option<LcvaeModel>,
    pub recommender: Recommender,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Serde(format!(
                "{}: unsupported checkpoint version {version:?}",
                path.display()
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::MfParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_version_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lc = LcvaeModel::new(5, 2, 3).unwrap();
        lc.init(&mut rng);
        let cp = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: "abc".into(),
            method: Method::LcdrWoLc,
            seed: 3,
            ivae: None,
            lcvae: Some(lc),
            recommender: Recommender { mf: MfParams::init(2, 5, 3, &mut rng), head: None, features: None },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cp.json");
        cp.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), cp);

        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Serde(_))));
    }
}
