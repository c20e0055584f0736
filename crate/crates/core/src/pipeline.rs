//! End-to-end runs shared by the command-line tool and the test suites:
//! supernets per dataset, zoo, encodings, meta-space and the
//! leave-one-dataset-out benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{Config, EncodingConfig};
use crate::dataio::DatasetDescriptor;
use crate::encoding::{encode_dataset, encode_model, FrozenExtractor, FunctionalProbe, RawDatasetEncoding};
use crate::error::{Error, Result};
use crate::metaspace::{train_metaspace, MetaDataset, MetaHeader, MetaModel, MetaTrainingSet, TrainedMetaSpace, METASPACE_SCHEMA};
use crate::numerics::{derive_seed, Tensor};
use crate::report::{fmt_f, Table};
use crate::retrieval::{query, topk_select, FinetuneConfig, ModelIndex};
use crate::statistics::fid_matrix;
use crate::supernet::{train_supernet, SearchSpace, SplitSets, SupernetCheckpoint, TrainSchedule};
use crate::zoo::{build_zoo, SupernetSource, ZooDataset, ZooManifest, ZooMeta, ZooPolicy};

/// A dataset together with its fixed train/validation split.
#[derive(Debug, Clone)]
pub struct Source {
    pub data: DatasetDescriptor,
    pub splits: SplitSets,
}

impl Source {
    pub fn new(data: DatasetDescriptor) -> Result<Self> {
        let splits = SplitSets::new(&data)?;
        Ok(Self { data, splits })
    }
}

/// Conventional location of a dataset's supernet, relative to the zoo manifest.
pub fn supernet_ref(dataset_id: &str) -> String {
    format!("supernets/{dataset_id}.mnw")
}

/// One supernet per source, trained in parallel; source `i` uses
/// `derive_seed(seed, i)`.
pub fn train_supernets(space: &SearchSpace, sources: &[Source], schedule: &TrainSchedule, seed: u64) -> Result<Vec<SupernetCheckpoint>> {
    sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = derive_seed(seed, i as u64);
            let trained = train_supernet(space, &s.splits, schedule, sd)?;
            log::info!("supernet {} trained ({} steps)", s.data.id, trained.optimizer_steps);
            Ok(SupernetCheckpoint::new(&s.data.id, space, sd, schedule, trained))
        })
        .collect()
}

/// Zoo over `sources` whose supernets are `ckpts` (same order).
pub fn zoo_from_supernets(
    space: &SearchSpace,
    sources: &[Source],
    ckpts: &[SupernetCheckpoint],
    policy: ZooPolicy,
    seed: u64,
) -> Result<ZooManifest> {
    let refs: Vec<String> = ckpts.iter().map(|c| supernet_ref(&c.meta.dataset_id)).collect();
    let supernets: BTreeMap<String, SupernetSource<'_>> = ckpts
        .iter()
        .zip(&refs)
        .map(|(c, r)| {
            (
                c.meta.dataset_id.clone(),
                SupernetSource {
                    supernet_ref: r,
                    theta: &c.theta,
                },
            )
        })
        .collect();
    let datasets: Vec<ZooDataset<'_>> = sources
        .iter()
        .map(|s| ZooDataset {
            id: &s.data.id,
            data: &s.splits,
        })
        .collect();
    let meta = ZooMeta {
        seed,
        policy,
        supernet_seeds: ckpts.iter().map(|c| (c.meta.dataset_id.clone(), c.meta.seed)).collect(),
        schedule: ckpts.first().map(|c| c.meta.schedule.clone()),
    };
    build_zoo(space, &datasets, &supernets, policy, meta)
}

/// Frozen encoders fixed by the configuration.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub probe: FunctionalProbe,
    pub extractor: FrozenExtractor,
    pub n_img: usize,
    pub data_seed: u64,
}

impl Encoders {
    pub fn new(space: &SearchSpace, cfg: &EncodingConfig) -> Result<Self> {
        let (c, h, w) = space.input_shape;
        Ok(Self {
            probe: FunctionalProbe::new(space, cfg.n_z, cfg.probe_seed)?,
            extractor: FrozenExtractor::new(c * h * w, cfg.feature_dim, cfg.extractor_seed),
            n_img: cfg.n_img,
            data_seed: cfg.data_seed,
        })
    }

    /// Raw model encodings in manifest order.
    pub fn encode_zoo<'a>(&self, zoo: &ZooManifest, theta_for: impl Fn(&str) -> Option<&'a [Tensor]> + Sync) -> Result<Vec<Vec<f32>>> {
        zoo.entries
            .par_iter()
            .map(|e| {
                let theta = theta_for(&e.supernet_ref).ok_or_else(|| Error::MissingSupernet(e.supernet_ref.clone()))?;
                encode_model(&zoo.space, theta, &e.arch, &self.probe)
            })
            .collect()
    }

    pub fn encode_datasets(&self, datasets: &[&DatasetDescriptor]) -> Result<Vec<RawDatasetEncoding>> {
        datasets
            .par_iter()
            .map(|d| encode_dataset(d, &self.extractor, self.n_img, self.data_seed))
            .collect()
    }

    pub fn header(&self, trained: &TrainedMetaSpace, set: &MetaTrainingSet, zoo: &ZooManifest, zoo_path: &str, index_path: &str) -> MetaHeader {
        let ms = &trained.space;
        MetaHeader {
            schema: METASPACE_SCHEMA.into(),
            model_dim: ms.model_norm.dim(),
            data_dim: ms.data_norm.dim(),
            config: ms.config.clone(),
            sigma_fid: ms.sigma_fid,
            dataset_ids: set.datasets.iter().map(|d| d.id.clone()).collect(),
            zoo_fingerprint: zoo.fingerprint(),
            zoo_path: zoo_path.into(),
            index_path: index_path.into(),
            extractor_seed: self.extractor.seed(),
            probe_seed: self.probe.seed,
            n_img: self.n_img,
            data_seed: self.data_seed,
        }
    }
}

/// Meta-space training set over every dataset of `zoo`, with the dataset
/// encodings given per id and model encodings in manifest order.
pub fn meta_training_set(zoo: &ZooManifest, model_raw: &[Vec<f32>], data: &BTreeMap<String, RawDatasetEncoding>) -> Result<MetaTrainingSet> {
    if model_raw.len() != zoo.entries.len() {
        return Err(Error::shape("model encodings", zoo.entries.len(), model_raw.len()));
    }
    let ids = zoo.dataset_ids();
    let mut stats = Vec::with_capacity(ids.len());
    let mut datasets = Vec::with_capacity(ids.len());
    for id in &ids {
        let enc = data.get(id).ok_or_else(|| Error::InvalidInput(format!("no dataset encoding for {id}")))?;
        stats.push(enc.stats.clone());
        datasets.push(MetaDataset {
            id: id.clone(),
            raw: enc.mean.clone(),
        });
    }
    let models = zoo
        .entries
        .iter()
        .zip(model_raw)
        .map(|(e, raw)| MetaModel {
            dataset: ids.iter().position(|i| *i == e.dataset_id).expect("id listed"),
            raw: raw.clone(),
            perf: e.estimated_perf,
        })
        .collect();
    Ok(MetaTrainingSet {
        datasets,
        models,
        fid: fid_matrix(&stats)?,
    })
}

/// The manifest restricted to the given datasets, order preserved.
pub fn subset_zoo(zoo: &ZooManifest, keep: &[String]) -> ZooManifest {
    ZooManifest {
        space: zoo.space.clone(),
        meta: zoo.meta.clone(),
        entries: zoo.entries.iter().filter(|e| keep.contains(&e.dataset_id)).cloned().collect(),
    }
}

/// Unit index over a zoo's models under a trained meta-space.
pub fn build_index(trained: &TrainedMetaSpace, zoo: &ZooManifest, model_raw: &[Vec<f32>]) -> Result<ModelIndex> {
    ModelIndex::new(trained.space.embed_models(model_raw)?, zoo.fingerprint())
}

/// One held-out query of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LooRun {
    pub seed: u64,
    pub dataset: String,
    /// Best fine-tuned validation accuracy among the first `k` candidates,
    /// one value per configured `k`.
    pub topk_acc: Vec<f64>,
    pub t1_source: String,
    /// FID-nearest training datasets, nearest first.
    pub nearest: Vec<String>,
    pub fid_skipped: bool,
}

impl LooRun {
    pub fn near_hit(&self) -> bool {
        self.nearest.contains(&self.t1_source)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub topk: Vec<usize>,
    pub runs: Vec<LooRun>,
}

impl LooReport {
    pub fn mean_topk(&self) -> Vec<f64> {
        let n = self.runs.len().max(1) as f64;
        (0..self.topk.len())
            .map(|i| self.runs.iter().map(|r| r.topk_acc[i]).sum::<f64>() / n)
            .collect()
    }

    pub fn near_hit_rate(&self) -> f64 {
        self.runs.iter().filter(|r| r.near_hit()).count() as f64 / self.runs.len().max(1) as f64
    }

    /// Held-out dataset against mean T_k accuracy over seeds, plus an
    /// overall row.
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(std::iter::once("dataset".to_string()).chain(self.topk.iter().map(|k| format!("T{k}"))));
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !ids.contains(&r.dataset.as_str()) {
                ids.push(&r.dataset);
            }
        }
        for id in ids {
            let rs: Vec<&LooRun> = self.runs.iter().filter(|r| r.dataset == id).collect();
            let means = (0..self.topk.len()).map(|i| rs.iter().map(|r| r.topk_acc[i]).sum::<f64>() / rs.len() as f64);
            t.push(std::iter::once(id.to_string()).chain(means.map(fmt_f)));
        }
        t.push(std::iter::once("mean".to_string()).chain(self.mean_topk().into_iter().map(fmt_f)));
        t
    }

    pub fn runs_table(&self) -> Table {
        let mut header = vec!["seed".to_string(), "dataset".into()];
        header.extend(self.topk.iter().map(|k| format!("T{k}")));
        header.extend(["t1_source".into(), "fid_nearest".into(), "near".into()]);
        let mut t = Table::new(header);
        for r in &self.runs {
            let mut row = vec![r.seed.to_string(), r.dataset.clone()];
            row.extend(r.topk_acc.iter().map(|&v| fmt_f(v)));
            row.push(r.t1_source.clone());
            row.push(r.nearest.join(" "));
            row.push(if r.near_hit() { "yes" } else { "no" }.into());
            t.push(row);
        }
        t
    }
}

/// Datasets other than `held` ordered by FID to it; ties keep index order.
fn fid_nearest(fid: &[Vec<f64>], held: usize, ids: &[String], n: usize) -> Vec<String> {
    let mut others: Vec<usize> = (0..ids.len()).filter(|&j| j != held).collect();
    others.sort_by(|&a, &b| fid[held][a].total_cmp(&fid[held][b]).then(a.cmp(&b)));
    others.into_iter().take(n).map(|j| ids[j].clone()).collect()
}

/// Leave-one-dataset-out over the configured family for seeds
/// `derive_seed(cfg.seed, 0..n_seeds)`. With `out`, every artifact lands
/// under `out/seed-<i>/` and the tables under `out/`.
pub fn eval_loo(cfg: &Config, n_seeds: usize, out: Option<&Path>) -> Result<LooReport> {
    cfg.validate()?;
    if n_seeds == 0 {
        return Err(Error::InvalidInput("eval-loo needs at least one seed".into()));
    }
    if cfg.family.shifts.len() < 2 {
        return Err(Error::InvalidConfig("eval-loo needs a family of at least 2 datasets".into()));
    }
    let mut runs = Vec::new();
    for s in 0..n_seeds {
        let dir = out.map(|o| o.join(format!("seed-{s}")));
        runs.extend(loo_one_seed(cfg, derive_seed(cfg.seed, s as u64), dir.as_deref())?);
    }
    let report = LooReport {
        topk: cfg.eval.topk.clone(),
        runs,
    };
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        let summary = report.summary_table();
        fs::write(o.join("report.txt"), summary.to_text())?;
        fs::write(o.join("report.csv"), summary.to_csv())?;
        fs::write(o.join("runs.csv"), report.runs_table().to_csv())?;
    }
    Ok(report)
}

fn loo_one_seed(cfg: &Config, seed: u64, dir: Option<&Path>) -> Result<Vec<LooRun>> {
    let space = &cfg.space;
    let sources: Vec<Source> = cfg.family.generate(seed)?.into_iter().map(Source::new).collect::<Result<_>>()?;
    let ids: Vec<String> = sources.iter().map(|s| s.data.id.clone()).collect();
    let ckpts = train_supernets(space, &sources, &cfg.supernet, seed)?;
    let zoo = zoo_from_supernets(space, &sources, &ckpts, cfg.zoo.policy, seed)?;
    let thetas: BTreeMap<String, &[Tensor]> = ckpts
        .iter()
        .map(|c| (supernet_ref(&c.meta.dataset_id), c.theta.as_slice()))
        .collect();
    let theta_for = |r: &str| thetas.get(r).copied();

    let enc = Encoders::new(space, &cfg.encoding)?;
    let model_raw = enc.encode_zoo(&zoo, theta_for)?;
    let data_enc = enc.encode_datasets(&sources.iter().map(|s| &s.data).collect::<Vec<_>>())?;
    let fid_all = fid_matrix(&data_enc.iter().map(|e| e.stats.clone()).collect::<Vec<_>>())?;
    let enc_by_id: BTreeMap<String, RawDatasetEncoding> = ids.iter().cloned().zip(data_enc.iter().cloned()).collect();

    if let Some(d) = dir {
        fs::create_dir_all(d.join("supernets"))?;
        fs::create_dir_all(d.join("data"))?;
        for (c, s) in ckpts.iter().zip(&sources) {
            c.save(d.join(supernet_ref(&c.meta.dataset_id)))?;
            s.data.write(d.join("data").join(format!("{}.mnds", s.data.id)))?;
        }
        zoo.write(d.join("zoo.jsonl"))?;
    }

    let kmax = *cfg.eval.topk.last().expect("validated");
    (0..ids.len())
        .into_par_iter()
        .map(|h| {
            let keep: Vec<String> = ids.iter().filter(|i| **i != ids[h]).cloned().collect();
            let sub = subset_zoo(&zoo, &keep);
            let sub_raw: Vec<Vec<f32>> = zoo
                .entries
                .iter()
                .zip(&model_raw)
                .filter(|(e, _)| keep.contains(&e.dataset_id))
                .map(|(_, r)| r.clone())
                .collect();
            let set = meta_training_set(&sub, &sub_raw, &enc_by_id)?;
            let trained = train_metaspace(&set, &cfg.metaspace, derive_seed(seed, 1000 + h as u64))?;
            let index = build_index(&trained, &sub, &sub_raw)?;
            let d_emb = trained.space.embed_datasets(&[data_enc[h].mean.clone()])?.remove(0);
            let q = query(&index, &d_emb, kmax)?;
            let ft = FinetuneConfig {
                seed: derive_seed(seed, 2000 + h as u64),
                ..cfg.finetune.clone()
            };
            let sel = topk_select(&q, &sub, theta_for, &sources[h].splits, &ft)?;
            let topk_acc = cfg
                .eval
                .topk
                .iter()
                .map(|&k| sel.candidates[..k.min(sel.candidates.len())].iter().map(|c| c.val_acc).fold(0.0, f64::max))
                .collect();
            if let Some(d) = dir {
                let stem = format!("holdout-{}", ids[h]);
                let (zp, ip, mp) = (format!("{stem}.zoo.jsonl"), format!("{stem}.index.mnw"), format!("{stem}.metaspace.mnw"));
                sub.write(d.join(&zp))?;
                index.save(d.join(&ip))?;
                trained.space.save(d.join(&mp), &enc.header(&trained, &set, &sub, &zp, &ip))?;
            }
            Ok(LooRun {
                seed,
                dataset: ids[h].clone(),
                topk_acc,
                t1_source: sub.entries[q.selected()].dataset_id.clone(),
                nearest: fid_nearest(&fid_all, h, &ids, cfg.eval.nearest_sources),
                fid_skipped: trained.fid_skipped,
            })
        })
        .collect()
}
