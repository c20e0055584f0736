//! The single TOML configuration file. Every section has defaults, unknown
//! keys are rejected, and `Config::dump` prints the effective values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityConfig;
use crate::dataio::FamilyConfig;
use crate::encoding::{DEFAULT_FEATURE_DIM, DEFAULT_N_IMG, DEFAULT_N_Z};
use crate::error::{Error, Result};
use crate::metaspace::MetaConfig;
use crate::retrieval::FinetuneConfig;
use crate::supernet::{SearchSpace, TrainSchedule};
use crate::zoo::{AuditConfig, ZooPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooConfig {
    pub policy: ZooPolicy,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self { policy: ZooPolicy::All }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    pub n_z: usize,
    pub n_img: usize,
    pub feature_dim: usize,
    pub extractor_seed: u64,
    pub probe_seed: u64,
    /// Seeds the image subsample behind each dataset encoding.
    pub data_seed: u64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            n_z: DEFAULT_N_Z,
            n_img: DEFAULT_N_IMG,
            feature_dim: DEFAULT_FEATURE_DIM,
            extractor_seed: 11,
            probe_seed: 13,
            data_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Candidate counts reported by `eval-loo`, ascending.
    pub topk: Vec<usize>,
    /// A T1 pick "comes from a near source" when its dataset is among this
    /// many FID-nearest training datasets of the held-out one.
    pub nearest_sources: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            topk: vec![1, 5, 10],
            nearest_sources: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub family: FamilyConfig,
    pub space: SearchSpace,
    pub supernet: TrainSchedule,
    pub zoo: ZooConfig,
    pub audit: AuditConfig,
    pub encoding: EncodingConfig,
    pub metaspace: MetaConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub affinity: AffinityConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.supernet.validate()?;
        self.audit.validate()?;
        self.metaspace.validate()?;
        self.affinity.validate()?;
        if self.family.shifts.is_empty() {
            return Err(Error::InvalidConfig("family.shifts must be non-empty".into()));
        }
        let (c, h, w) = self.space.input_shape;
        let b = &self.family.base;
        if (c, h, w) != (1, b.height as usize, b.width as usize) || self.space.num_classes != b.classes as usize {
            return Err(Error::InvalidConfig(
                "space.input_shape / num_classes disagree with the family image size / classes".into(),
            ));
        }
        let e = &self.encoding;
        if e.n_z == 0 || e.n_img < 2 || e.feature_dim == 0 {
            return Err(Error::InvalidConfig("encoding: n_z >= 1, n_img >= 2, feature_dim >= 1".into()));
        }
        let t = &self.eval.topk;
        if t.is_empty() || t[0] == 0 || t.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidConfig("eval.topk must be strictly ascending and >= 1".into()));
        }
        if self.eval.nearest_sources == 0 {
            return Err(Error::InvalidConfig("eval.nearest_sources must be >= 1".into()));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::InvalidConfig("finetune.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_roundtrips() {
        let cfg = Config::default();
        let text = cfg.dump();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::from_toml("seed = 5\n[metaspace]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.metaspace.epochs, 3);
        assert_eq!(cfg.metaspace.hidden, 128);
        assert_eq!(cfg.space, SearchSpace::default());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(Config::from_toml("sede = 5\n"), Err(Error::Toml(_))));
        assert!(matches!(Config::from_toml("[eval]\ntopk = [5, 1]\n"), Err(Error::InvalidConfig(_))));
        assert!(Config::from_toml("[zoo]\npolicy = \"sample:0\"\n").is_err());
    }
}
