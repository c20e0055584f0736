//! Cosine-similarity retrieval over the model embeddings and the top-k
//! fine-tune-and-select protocol.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetDescriptor;
use crate::encoding::{encode_dataset, FrozenExtractor};
use crate::error::{Error, Result};
use crate::metaspace::MetaSpace;
use crate::numerics::{derive_seed, read_tensors, sidecar_path, write_tensors, AdamConfig, Tensor};
use crate::supernet::{accuracy, extract_subnet, fit, Network, SplitSets};
use crate::zoo::ZooManifest;

pub const INDEX_SCHEMA: &str = "mednns-index/1";

/// Unit model embeddings in zoo manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelIndex {
    pub embeddings: Vec<Vec<f64>>,
    pub zoo_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    schema: String,
    zoo_fingerprint: String,
    rows: usize,
    dim: usize,
}

impl ModelIndex {
    pub fn new(embeddings: Vec<Vec<f64>>, zoo_fingerprint: String) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InvalidInput("empty model index".into()));
        }
        let d = embeddings[0].len();
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != d {
                return Err(Error::shape("model index row", d, e.len()));
            }
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self {
            embeddings,
            zoo_fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.embeddings[0].len();
        let data: Vec<f32> = self.embeddings.iter().flatten().map(|&v| v as f32).collect();
        write_tensors(path, &[Tensor::new(vec![self.len(), d], data)?])?;
        let h = IndexHeader {
            schema: INDEX_SCHEMA.into(),
            zoo_fingerprint: self.zoo_fingerprint.clone(),
            rows: self.len(),
            dim: d,
        };
        fs::write(sidecar_path(path), serde_json::to_string(&h)? + "\n")?;
        Ok(())
    }

    /// Load an index, refusing one built against a different zoo.
    pub fn load(path: impl AsRef<Path>, zoo: &ZooManifest) -> Result<Self> {
        let path = path.as_ref();
        let h: IndexHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if h.schema != INDEX_SCHEMA {
            return Err(Error::Format(format!("unknown index schema {:?}", h.schema)));
        }
        let fp = zoo.fingerprint();
        if h.zoo_fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                expected: h.zoo_fingerprint,
                found: fp,
            });
        }
        let t = read_tensors(path)?;
        if t.len() != 1 || t[0].shape() != [h.rows, h.dim] || h.rows != zoo.entries.len() {
            return Err(Error::Format("index matrix does not match its header or zoo".into()));
        }
        // stored as f32; renormalise in f64
        let embeddings = (0..h.rows)
            .map(|i| {
                let r: Vec<f64> = t[0].row(i).iter().map(|&v| v as f64).collect();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(|v| v / n).collect()
            })
            .collect();
        Self::new(embeddings, h.zoo_fingerprint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// `(manifest index, cosine)`, scores non-increasing.
    pub ranked: Vec<(usize, f64)>,
    pub clamped: bool,
}

impl QueryResult {
    pub fn selected(&self) -> usize {
        self.ranked[0].0
    }

    /// The first `k` candidates.
    pub fn prefix(&self, k: usize) -> QueryResult {
        QueryResult {
            ranked: self.ranked[..k.min(self.ranked.len())].to_vec(),
            clamped: self.clamped,
        }
    }
}

/// Top-`k` models by cosine similarity; equal scores keep manifest order.
/// `k` beyond the index size is clamped with a warning.
pub fn query(index: &ModelIndex, d_emb: &[f64], k: usize) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::InvalidInput("topk must be >= 1".into()));
    }
    if index.is_empty() {
        return Err(Error::InvalidInput("empty model index".into()));
    }
    let dim = index.embeddings[0].len();
    if d_emb.len() != dim {
        return Err(Error::shape("query embedding", dim, d_emb.len()));
    }
    let clamped = k > index.len();
    if clamped {
        log::warn!("topk {k} exceeds the {} indexed models; clamped", index.len());
    }
    let dn = d_emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = index
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.iter().zip(d_emb).map(|(a, b)| a * b).sum::<f64>() / dn))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(index.len()));
    Ok(QueryResult { ranked: scored, clamped })
}

/// `E_d` embedding of a dataset the meta-space has not seen.
pub fn embed_new_dataset(
    ds: &DatasetDescriptor,
    extractor: &FrozenExtractor,
    ms: &MetaSpace,
    n_img: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let enc = encode_dataset(ds, extractor, n_img, seed)?;
    Ok(ms.embed_datasets(&[enc.mean])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            adam: AdamConfig::with_lr(3e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateResult {
    pub manifest_index: usize,
    pub cosine: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub chosen: usize,
    pub val_acc: f64,
    pub candidates: Vec<CandidateResult>,
    /// Fine-tuned weights of the chosen model, ready for continued training.
    pub network: Network,
}

/// Fine-tune every candidate from its inherited weights, evaluate on the
/// target's validation split and keep the best; ties go to the higher
/// cosine score. Each candidate's run is seeded by its manifest index, so
/// a candidate scores the same whichever `k` it appears under.
pub fn topk_select<'a>(
    candidates: &QueryResult,
    zoo: &ZooManifest,
    theta_for: impl Fn(&str) -> Option<&'a [Tensor]> + Sync,
    target: &SplitSets,
    cfg: &FinetuneConfig,
) -> Result<Selection> {
    if candidates.ranked.is_empty() {
        return Err(Error::InvalidInput("no candidates".into()));
    }
    let runs = candidates
        .ranked
        .par_iter()
        .map(|&(idx, cos)| {
            let e = zoo
                .entries
                .get(idx)
                .ok_or_else(|| Error::InvalidInput(format!("candidate {idx} not in zoo")))?;
            let theta = theta_for(&e.supernet_ref).ok_or_else(|| Error::MissingSupernet(e.supernet_ref.clone()))?;
            let mut net = extract_subnet(&zoo.space, theta, &e.arch)?;
            fit(&mut net, &target.train, cfg.epochs, cfg.batch_size, &cfg.adam, derive_seed(cfg.seed, idx as u64))?;
            let acc = accuracy(&net, &target.val)?;
            Ok((
                CandidateResult {
                    manifest_index: idx,
                    cosine: cos,
                    val_acc: acc,
                },
                net,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (c, _)) in runs.iter().enumerate() {
        if c.val_acc > runs[best].0.val_acc {
            best = i;
        }
    }
    let chosen = runs[best].0.manifest_index;
    let val_acc = runs[best].0.val_acc;
    let network = runs[best].1.clone();
    Ok(Selection {
        chosen,
        val_acc,
        candidates: runs.into_iter().map(|(c, _)| c).collect(),
        network,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn index(rows: Vec<Vec<f64>>) -> ModelIndex {
        ModelIndex::new(rows.iter().map(|r| unit(r)).collect(), "fp".into()).unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let idx = index(vec![vec![1.0, 0.0], vec![0.3, 0.7], vec![0.0, 1.0]]);
        let q = query(&idx, &unit(&[0.3, 0.7]), 3).unwrap();
        assert_eq!(q.selected(), 1);
        assert!((q.ranked[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_manifest_order() {
        let idx = index(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let q = query(&idx, &[1.0, 0.0], 2).unwrap();
        assert_eq!(q.ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn angles_give_cosines() {
        let a = std::f64::consts::PI / 3.0;
        let idx = index(vec![vec![0.0, 1.0], vec![a.cos(), a.sin()], vec![1.0, 0.0]]);
        let q = query(&idx, &[1.0, 0.0], 3).unwrap();
        let got: Vec<(usize, f64)> = q.ranked.clone();
        assert_eq!(got.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 1, 0]);
        for (s, want) in got.iter().map(|r| r.1).zip([1.0, 0.5, 0.0]) {
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_k_is_clamped() {
        let idx = index(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = query(&idx, &[1.0, 0.0], 3).unwrap();
        assert!(q.clamped);
        assert_eq!(q.ranked.len(), 2);
        assert!(query(&idx, &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn prefix_property() {
        let idx = index((0..20).map(|i| vec![(i as f64).cos(), (i as f64).sin(), 0.3]).collect());
        let q10 = query(&idx, &unit(&[0.2, 0.5, 1.0]), 10).unwrap();
        let q5 = query(&idx, &unit(&[0.2, 0.5, 1.0]), 5).unwrap();
        assert_eq!(q10.prefix(5), QueryResult { clamped: false, ..q5 });
    }
}
