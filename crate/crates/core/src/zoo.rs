//! Model zoo: (dataset, subnetwork, inherited accuracy) records extracted
//! from trained supernets, stored as a line-delimited manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng, Stream, Tensor};
use crate::statistics::{spearman, Correlation};
use crate::supernet::{
    estimate_performance, short_hash, train_scratch, ArchitectureConfig, FairnessSampler, SearchSpace, SplitSets,
    TrainSchedule,
};

pub const ZOO_SCHEMA: &str = "mednns-zoo/1";
/// Largest space `ZooPolicy::All` will enumerate.
pub const MAX_ENUMERATED: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooEntry {
    pub dataset_id: String,
    pub arch: ArchitectureConfig,
    pub supernet_ref: String,
    pub estimated_perf: f64,
    pub scratch_perf: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ZooPolicy {
    All,
    Sample(usize),
    Maximal,
}

impl fmt::Display for ZooPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZooPolicy::All => f.write_str("all"),
            ZooPolicy::Sample(n) => write!(f, "sample:{n}"),
            ZooPolicy::Maximal => f.write_str("maximal"),
        }
    }
}

impl FromStr for ZooPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ZooPolicy::All),
            "maximal" => Ok(ZooPolicy::Maximal),
            _ => s
                .strip_prefix("sample:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(ZooPolicy::Sample)
                .ok_or_else(|| Error::InvalidConfig(format!("zoo policy {s:?}: expected all, maximal or sample:<n>"))),
        }
    }
}

impl From<ZooPolicy> for String {
    fn from(p: ZooPolicy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for ZooPolicy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl ZooPolicy {
    /// Configs extracted per dataset.
    pub fn configs(&self, space: &SearchSpace, seed: u64) -> Result<Vec<ArchitectureConfig>> {
        match *self {
            ZooPolicy::All => {
                if space.total_configs() > MAX_ENUMERATED {
                    return Err(Error::InvalidConfig(format!(
                        "policy all: space has {} configs (limit {MAX_ENUMERATED}); use sample:<n>",
                        space.total_configs()
                    )));
                }
                Ok(space.enumerate())
            }
            ZooPolicy::Sample(n) => {
                if n > space.total_configs() {
                    return Err(Error::InvalidConfig(format!(
                        "policy sample:{n} exceeds the {} configs in the space",
                        space.total_configs()
                    )));
                }
                // fair draws, skipping configs already taken
                let mut sampler = FairnessSampler::new(space.clone(), Rng::stream(seed, Stream::Sampling));
                let mut seen = std::collections::BTreeSet::new();
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let cfg = sampler.next_config();
                    if seen.insert(cfg.to_string()) {
                        out.push(cfg);
                    }
                }
                Ok(out)
            }
            ZooPolicy::Maximal => Ok(vec![space.maximal_config()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooMeta {
    pub seed: u64,
    pub policy: ZooPolicy,
    pub supernet_seeds: BTreeMap<String, u64>,
    pub schedule: Option<TrainSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    space_fingerprint: String,
    space: SearchSpace,
    meta: ZooMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooManifest {
    pub space: SearchSpace,
    pub meta: ZooMeta,
    pub entries: Vec<ZooEntry>,
}

impl ZooManifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema: ZOO_SCHEMA.into(),
            space_fingerprint: self.space.fingerprint(),
            space: self.space.clone(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Format("empty zoo manifest".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Format(format!("zoo header: {e}")))?;
        if header.schema != ZOO_SCHEMA {
            return Err(Error::Format(format!("zoo schema {:?}, expected {ZOO_SCHEMA:?}", header.schema)));
        }
        header.space.validate()?;
        if header.space.fingerprint() != header.space_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: header.space_fingerprint,
                found: header.space.fingerprint(),
            });
        }
        let mut entries = Vec::new();
        for (no, line) in lines {
            let e: ZooEntry = serde_json::from_str(line).map_err(|e| Error::Format(format!("zoo line {}: {e}", no + 1)))?;
            entries.push(e);
        }
        let m = Self {
            space: header.space,
            meta: header.meta,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            self.space.check(&e.arch)?;
            let ok = |p: f64| (0.0..=1.0).contains(&p);
            if !ok(e.estimated_perf) || !e.scratch_perf.is_none_or(ok) {
                return Err(Error::Format(format!("{} {}: performance outside [0, 1]", e.dataset_id, e.arch)));
            }
            if !seen.insert((e.dataset_id.clone(), e.arch.to_string())) {
                return Err(Error::Format(format!("duplicate zoo entry {} {}", e.dataset_id, e.arch)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn fingerprint(&self) -> String {
        short_hash(self.to_jsonl().as_bytes())
    }

    /// Dataset ids in first-appearance order.
    pub fn dataset_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.dataset_id) {
                ids.push(e.dataset_id.clone());
            }
        }
        ids
    }

    pub fn indices_for(&self, dataset_id: &str) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].dataset_id == dataset_id).collect()
    }
}

/// A trained supernet the zoo can draw from.
#[derive(Debug, Clone, Copy)]
pub struct SupernetSource<'a> {
    pub supernet_ref: &'a str,
    pub theta: &'a [Tensor],
}

/// Dataset side of a zoo build: id plus the split used for `P̂`.
#[derive(Debug, Clone, Copy)]
pub struct ZooDataset<'a> {
    pub id: &'a str,
    pub data: &'a SplitSets,
}

/// Extract subnetworks from every dataset's supernet and record `P̂`.
/// `Θ` is only read; no optimizer is involved.
pub fn build_zoo(
    space: &SearchSpace,
    datasets: &[ZooDataset<'_>],
    supernets: &BTreeMap<String, SupernetSource<'_>>,
    policy: ZooPolicy,
    meta: ZooMeta,
) -> Result<ZooManifest> {
    space.validate()?;
    let mut jobs = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        let src = supernets.get(ds.id).ok_or_else(|| Error::MissingSupernet(ds.id.to_string()))?;
        space.supernet_shape().check_params(src.theta)?;
        for cfg in policy.configs(space, derive_seed(meta.seed, di as u64))? {
            jobs.push((ds, *src, cfg));
        }
    }
    let entries = jobs
        .into_par_iter()
        .map(|(ds, src, arch)| {
            let p = estimate_performance(space, src.theta, &arch, &ds.data.val)?;
            Ok(ZooEntry {
                dataset_id: ds.id.to_string(),
                arch,
                supernet_ref: src.supernet_ref.to_string(),
                estimated_perf: p,
                scratch_perf: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = ZooManifest {
        space: space.clone(),
        meta: ZooMeta { policy, ..meta },
        entries,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankAudit {
    pub dataset_id: String,
    pub n: usize,
    pub rho: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Entries audited per dataset.
    pub k: usize,
    /// Independent scratch runs averaged into each `P`.
    pub repeats: usize,
    pub schedule: TrainSchedule,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            k: 16,
            repeats: 3,
            schedule: TrainSchedule::default(),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::InvalidConfig(format!("audit needs k >= 3, got {}", self.k)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("audit repeats must be >= 1".into()));
        }
        self.schedule.validate()
    }
}

/// Scratch-train `k` zoo entries per dataset (a seeded random subset, all of
/// them when `k` equals the count) and correlate `P̂` against scratch `P`,
/// the mean accuracy over `repeats` fresh initialisations.
pub fn audit_rank(
    manifest: &mut ZooManifest,
    datasets: &BTreeMap<String, SplitSets>,
    audit: &AuditConfig,
    seed: u64,
) -> Result<Vec<RankAudit>> {
    audit.validate()?;
    let k = audit.k;
    let mut picks = Vec::new();
    for (di, id) in manifest.dataset_ids().iter().enumerate() {
        let idx = manifest.indices_for(id);
        if k > idx.len() {
            return Err(Error::InvalidInput(format!("k = {k} exceeds {} entries for {id}", idx.len())));
        }
        if !datasets.contains_key(id) {
            return Err(Error::InvalidInput(format!("no dataset supplied for {id}")));
        }
        let mut chosen: Vec<usize> = Rng::substream(seed, Stream::Split, di as u64)
            .sample_indices(idx.len(), k)
            .into_iter()
            .map(|j| idx[j])
            .collect();
        chosen.sort_unstable();
        picks.push((id.clone(), chosen));
    }
    let space = manifest.space.clone();
    let jobs: Vec<usize> = picks.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let runs: Vec<(usize, u64)> = jobs.iter().flat_map(|&i| (0..audit.repeats as u64).map(move |r| (i, r))).collect();
    let entries = &manifest.entries;
    let scratch = runs
        .par_iter()
        .map(|&(i, r)| {
            let e = &entries[i];
            let s = derive_seed(derive_seed(seed, i as u64), r);
            train_scratch(&space, &e.arch, &datasets[&e.dataset_id], &audit.schedule, s)
        })
        .collect::<Result<Vec<_>>>()?;
    for (j, &i) in jobs.iter().enumerate() {
        let accs = &scratch[j * audit.repeats..(j + 1) * audit.repeats];
        manifest.entries[i].scratch_perf = Some(accs.iter().sum::<f64>() / audit.repeats as f64);
    }
    picks
        .into_iter()
        .map(|(id, chosen)| {
            let est: Vec<f64> = chosen.iter().map(|&i| manifest.entries[i].estimated_perf).collect();
            let scr: Vec<f64> = chosen.iter().map(|&i| manifest.entries[i].scratch_perf.unwrap()).collect();
            Ok(RankAudit {
                dataset_id: id,
                n: chosen.len(),
                rho: spearman(&est, &scr)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics::Correlation;

    fn manifest() -> ZooManifest {
        let space = SearchSpace::default();
        let cfgs = space.enumerate();
        ZooManifest {
            space,
            meta: ZooMeta {
                seed: 3,
                policy: ZooPolicy::Sample(2),
                supernet_seeds: BTreeMap::from([("a".to_string(), 1)]),
                schedule: None,
            },
            entries: vec![
                ZooEntry {
                    dataset_id: "a".into(),
                    arch: cfgs[3].clone(),
                    supernet_ref: "sn/a.mnw".into(),
                    estimated_perf: 0.1 + 0.2,
                    scratch_perf: Some(1.0 / 3.0),
                },
                ZooEntry {
                    dataset_id: "a".into(),
                    arch: cfgs[400].clone(),
                    supernet_ref: "sn/a.mnw".into(),
                    estimated_perf: 0.7,
                    scratch_perf: None,
                },
            ],
        }
    }

    #[test]
    fn jsonl_roundtrip_is_byte_identical() {
        let m = manifest();
        let text = m.to_jsonl();
        let back = ZooManifest::from_jsonl(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl(), text);
        assert!(text.starts_with("{\"schema\":\"mednns-zoo/1\""));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_schema_and_config() {
        let text = manifest().to_jsonl().replace("mednns-zoo/1", "mednns-zoo/9");
        assert!(matches!(ZooManifest::from_jsonl(&text), Err(Error::Format(_))));
        let text = manifest().to_jsonl().replace("\"depth\":1", "\"depth\":5");
        assert!(ZooManifest::from_jsonl(&text).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("all".parse::<ZooPolicy>().unwrap(), ZooPolicy::All);
        assert_eq!("sample:16".parse::<ZooPolicy>().unwrap(), ZooPolicy::Sample(16));
        assert!("sample:0".parse::<ZooPolicy>().is_err());
        assert!("some".parse::<ZooPolicy>().is_err());
    }

    #[test]
    fn missing_supernet_is_reported() {
        let data = SplitSets {
            train: Default::default(),
            val: Default::default(),
        };
        let ds = [ZooDataset { id: "x", data: &data }];
        let err = build_zoo(&SearchSpace::default(), &ds, &BTreeMap::new(), ZooPolicy::All, manifest().meta).unwrap_err();
        assert!(matches!(err, Error::MissingSupernet(ref id) if id == "x"));
    }

    #[test]
    fn audit_requires_three() {
        let mut m = manifest();
        let small = AuditConfig {
            k: 2,
            ..AuditConfig::default()
        };
        assert!(audit_rank(&mut m, &BTreeMap::new(), &small, 0).is_err());
    }

    #[test]
    fn identical_scores_are_degenerate() {
        assert_eq!(spearman(&[0.5; 4], &[0.5; 4]).unwrap(), Correlation::Degenerate);
    }
}
