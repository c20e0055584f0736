//! Synthetic zoo whose true performance is a known affinity between latent
//! dataset and model factors. Used to check that a trained meta-space
//! recovers per-dataset rankings and to compare loss combinations on
//! held-out datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metaspace::{train_metaspace, MetaConfig, MetaDataset, MetaModel, MetaTrainingSet};
use crate::numerics::{cosine, sigmoid, Rng, Stream};
use crate::statistics::{fid_matrix, spearman, Correlation, GaussianStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    pub clusters: usize,
    pub datasets_per_cluster: usize,
    pub models_per_dataset: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub data_dim: usize,
    /// Spread of dataset factors around their cluster centre (before normalising).
    pub cluster_spread: f64,
    pub model_noise: f64,
    /// Noise on the dataset mean encoding; FID also sees the covariance.
    pub data_noise: f64,
    /// `P = σ(gain · u·v)`.
    pub gain: f64,
    /// Datasets per cluster held out of training and used as queries.
    pub heldout_per_cluster: usize,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            datasets_per_cluster: 4,
            models_per_dataset: 24,
            latent_dim: 4,
            model_dim: 41,
            data_dim: 32,
            cluster_spread: 0.35,
            model_noise: 0.1,
            data_noise: 0.5,
            gain: 3.0,
            heldout_per_cluster: 1,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.latent_dim == 0 || self.model_dim == 0 || self.data_dim == 0 {
            return Err(Error::InvalidConfig("affinity: sizes must be >= 1".into()));
        }
        if self.heldout_per_cluster >= self.datasets_per_cluster {
            return Err(Error::InvalidConfig("affinity: every cluster needs a training dataset".into()));
        }
        if self.models_per_dataset < 3 {
            return Err(Error::InvalidConfig("affinity: models_per_dataset must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AffinityBench {
    pub gain: f64,
    pub dataset_latent: Vec<Vec<f64>>,
    pub model_latent: Vec<Vec<f64>>,
    /// Dataset each model was trained for.
    pub model_owner: Vec<usize>,
    pub data_raw: Vec<Vec<f32>>,
    pub model_raw: Vec<Vec<f32>>,
    pub stats: Vec<GaussianStats>,
    pub cluster: Vec<usize>,
    pub heldout: Vec<usize>,
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| std * rng.normal()).collect()).collect()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

impl AffinityBench {
    pub fn generate(cfg: &AffinityConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(seed, Stream::Custom(0xAFF1));
        let r = cfg.latent_dim;
        let a_model = gaussian_matrix(&mut rng, cfg.model_dim, r, 1.0);
        let a_data = gaussian_matrix(&mut rng, cfg.data_dim, r, 1.0);
        let a_cov = gaussian_matrix(&mut rng, cfg.data_dim, r, 0.5);
        let centres = gaussian_matrix(&mut rng, cfg.clusters, r, 1.0);

        let mut bench = AffinityBench {
            gain: cfg.gain,
            dataset_latent: Vec::new(),
            model_latent: Vec::new(),
            model_owner: Vec::new(),
            data_raw: Vec::new(),
            model_raw: Vec::new(),
            stats: Vec::new(),
            cluster: Vec::new(),
            heldout: Vec::new(),
        };
        for (k, c) in centres.iter().enumerate() {
            for j in 0..cfg.datasets_per_cluster {
                let d = bench.dataset_latent.len();
                let mut u: Vec<f64> = c.iter().map(|v| v + cfg.cluster_spread * rng.normal()).collect();
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v /= n);

                let mean: Vec<f64> = matvec(&a_data, &u).into_iter().map(|v| v + cfg.data_noise * rng.normal()).collect();
                let var: Vec<f64> = matvec(&a_cov, &u).into_iter().map(f64::exp).collect();
                let dd = cfg.data_dim;
                let mut cov = vec![0.0; dd * dd];
                for (i, v) in var.iter().enumerate() {
                    cov[i * dd + i] = *v;
                }
                bench.data_raw.push(mean.iter().map(|&v| v as f32).collect());
                bench.stats.push(GaussianStats::from_parts(mean, cov, 0)?);
                bench.dataset_latent.push(u);
                bench.cluster.push(k);
                if j >= cfg.datasets_per_cluster - cfg.heldout_per_cluster {
                    bench.heldout.push(d);
                }
                for _ in 0..cfg.models_per_dataset {
                    let v: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
                    let x = matvec(&a_model, &v).into_iter().map(|x| (x + cfg.model_noise * rng.normal()) as f32);
                    bench.model_raw.push(x.collect());
                    bench.model_latent.push(v);
                    bench.model_owner.push(d);
                }
            }
        }
        Ok(bench)
    }

    /// True performance of model `m` on dataset `d`.
    pub fn affinity(&self, m: usize, d: usize) -> f64 {
        let s: f64 = self.model_latent[m].iter().zip(&self.dataset_latent[d]).map(|(a, b)| a * b).sum();
        sigmoid(self.gain * s)
    }

    pub fn training_datasets(&self) -> Vec<usize> {
        (0..self.dataset_latent.len()).filter(|d| !self.heldout.contains(d)).collect()
    }

    /// Training set over the non-held-out datasets and the models each owns,
    /// plus the model indices in set order.
    pub fn training_set(&self) -> Result<(MetaTrainingSet, Vec<usize>)> {
        let train = self.training_datasets();
        let stats: Vec<GaussianStats> = train.iter().map(|&d| self.stats[d].clone()).collect();
        let mut models = Vec::new();
        let mut order = Vec::new();
        for (pos, &d) in train.iter().enumerate() {
            for m in (0..self.model_owner.len()).filter(|&m| self.model_owner[m] == d) {
                models.push(MetaModel {
                    dataset: pos,
                    raw: self.model_raw[m].clone(),
                    perf: self.affinity(m, d),
                });
                order.push(m);
            }
        }
        let set = MetaTrainingSet {
            datasets: train
                .iter()
                .map(|&d| MetaDataset {
                    id: format!("aff{d}"),
                    raw: self.data_raw[d].clone(),
                })
                .collect(),
            models,
            fid: fid_matrix(&stats)?,
        };
        Ok((set, order))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityOutcome {
    /// Per training dataset: Spearman(cosine, P) over its own models.
    pub spearman: Vec<Correlation>,
    /// Per training dataset: best P minus P of the top-cosine own model.
    pub regret: Vec<f64>,
    /// Per held-out dataset, retrieving among all training models.
    pub heldout_regret: Vec<f64>,
    pub fid_skipped: bool,
}

impl AffinityOutcome {
    /// `1 − mean held-out regret`.
    pub fn retrieval_accuracy(&self) -> f64 {
        if self.heldout_regret.is_empty() {
            return 1.0;
        }
        1.0 - self.heldout_regret.iter().sum::<f64>() / self.heldout_regret.len() as f64
    }

    pub fn min_spearman(&self) -> Option<f64> {
        self.spearman.iter().map(|c| c.value()).try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
    }

    pub fn max_regret(&self) -> f64 {
        self.regret.iter().copied().fold(0.0, f64::max)
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Train a meta-space on the benchmark's training split and score it.
pub fn evaluate_affinity(bench: &AffinityBench, config: &MetaConfig, seed: u64) -> Result<AffinityOutcome> {
    let (set, order) = bench.training_set()?;
    let trained = train_metaspace(&set, config, seed)?;
    let ms = &trained.space;
    let model_raw: Vec<Vec<f32>> = set.models.iter().map(|m| m.raw.clone()).collect();
    let em = ms.embed_models(&model_raw)?;
    let train = bench.training_datasets();
    let ed = ms.embed_datasets(&set.datasets.iter().map(|d| d.raw.clone()).collect::<Vec<_>>())?;

    let mut out = AffinityOutcome {
        spearman: Vec::new(),
        regret: Vec::new(),
        heldout_regret: Vec::new(),
        fid_skipped: trained.fid_skipped,
    };
    for (pos, d_emb) in ed.iter().enumerate() {
        let own = set.models_of(pos);
        let cos: Vec<f64> = own.iter().map(|&i| cosine(d_emb, &em[i])).collect();
        let perf: Vec<f64> = own.iter().map(|&i| set.models[i].perf).collect();
        out.spearman.push(spearman(&cos, &perf)?);
        let best = perf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.regret.push(best - perf[argmax_first(&cos)]);
    }
    debug_assert_eq!(train.len(), ed.len());

    let q_raw: Vec<Vec<f32>> = bench.heldout.iter().map(|&d| bench.data_raw[d].clone()).collect();
    if !q_raw.is_empty() {
        for (q_emb, &q) in ms.embed_datasets(&q_raw)?.iter().zip(&bench.heldout) {
            let cos: Vec<f64> = em.iter().map(|e| cosine(q_emb, e)).collect();
            let truth: Vec<f64> = order.iter().map(|&m| bench.affinity(m, q)).collect();
            let best = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.heldout_regret.push(best - truth[argmax_first(&cos)]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let cfg = AffinityConfig::default();
        let a = AffinityBench::generate(&cfg, 3).unwrap();
        let b = AffinityBench::generate(&cfg, 3).unwrap();
        assert_eq!(a.model_raw, b.model_raw);
        assert_eq!(a.dataset_latent.len(), 12);
        assert_eq!(a.model_raw.len(), 12 * 24);
        assert_eq!(a.heldout, vec![3, 7, 11]);
        let (set, order) = a.training_set().unwrap();
        set.validate().unwrap();
        assert_eq!(set.datasets.len(), 9);
        assert_eq!(order.len(), 9 * 24);
    }

    #[test]
    fn affinity_is_in_unit_interval() {
        let b = AffinityBench::generate(&AffinityConfig::default(), 1).unwrap();
        for m in 0..b.model_latent.len() {
            let p = b.affinity(m, b.model_owner[m]);
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
