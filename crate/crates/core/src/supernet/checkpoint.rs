use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::space::SearchSpace;
use super::train::{EpochLog, TrainSchedule, TrainedSupernet};
use crate::error::{Error, Result};
use crate::numerics::{read_tensors, sidecar_path, write_tensors, Tensor};

pub const SUPERNET_SCHEMA: &str = "mednns-supernet/1";

/// Sidecar stored next to the weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetMeta {
    pub schema: String,
    pub dataset_id: String,
    pub space: SearchSpace,
    pub space_fingerprint: String,
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub optimizer_steps: u64,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct SupernetCheckpoint {
    pub meta: SupernetMeta,
    pub theta: Vec<Tensor>,
}

impl SupernetCheckpoint {
    pub fn new(dataset_id: &str, space: &SearchSpace, seed: u64, schedule: &TrainSchedule, trained: TrainedSupernet) -> Self {
        Self {
            meta: SupernetMeta {
                schema: SUPERNET_SCHEMA.into(),
                dataset_id: dataset_id.into(),
                space: space.clone(),
                space_fingerprint: space.fingerprint(),
                seed,
                schedule: schedule.clone(),
                optimizer_steps: trained.optimizer_steps,
                log: trained.log,
            },
            theta: trained.theta,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_tensors(path, &self.theta)?;
        let mut json = serde_json::to_string_pretty(&self.meta)?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: SupernetMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if meta.schema != SUPERNET_SCHEMA {
            return Err(Error::Format(format!("unknown supernet schema {:?}", meta.schema)));
        }
        meta.space.validate()?;
        if meta.space.fingerprint() != meta.space_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: meta.space_fingerprint.clone(),
                found: meta.space.fingerprint(),
            });
        }
        let theta = read_tensors(path)?;
        meta.space.supernet_shape().check_params(&theta)?;
        Ok(Self { meta, theta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::supernet::Network;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let space = SearchSpace::default();
        let theta = Network::<f32>::init(space.supernet_shape(), &mut Rng::new(1)).params;
        let ck = SupernetCheckpoint::new(
            "syn0",
            &space,
            1,
            &TrainSchedule::default(),
            TrainedSupernet {
                theta,
                log: vec![],
                optimizer_steps: 7,
            },
        );
        let p = dir.path().join("syn0.mnw");
        ck.save(&p).unwrap();
        let back = SupernetCheckpoint::load(&p).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.theta, ck.theta);
        let bytes = fs::read(&p).unwrap();
        back.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }
}
