//! Joint model/dataset embedding space trained with performance, rank, FID
//! and (for ablations) contrastive losses.

mod losses;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use losses::{loss_contrastive, loss_fid, loss_perf, loss_rank, top_quantile, RankGrad, UNIT_TOL};

use crate::error::{Error, Result};
use crate::numerics::{
    normalize_backward, read_tensors, sidecar_path, write_tensors, Activation, AdamConfig, AdamState, Mlp, Rng, Scalar,
    Stream, Tensor,
};
use crate::statistics::median;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub beta: f64,
    /// `None` selects the median pairwise FID of the training datasets.
    pub sigma_fid: Option<f64>,
    pub lambda_perf: f64,
    pub lambda_rank: f64,
    pub lambda_fid: f64,
    pub lambda_contrastive: f64,
    pub temperature: f64,
    pub positive_fraction: f64,
    pub max_pairs: usize,
    pub min_gap: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed_dim: 64,
            beta: 10.0,
            sigma_fid: None,
            lambda_perf: 1.0,
            lambda_rank: 1.0,
            lambda_fid: 1.0,
            lambda_contrastive: 0.0,
            temperature: 0.1,
            positive_fraction: 0.2,
            max_pairs: 64,
            min_gap: 1e-4,
            epochs: 200,
            adam: AdamConfig::with_lr(1e-2),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("metaspace: {m}")));
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be >= 1");
        }
        if !(self.beta > 0.0) || !(self.temperature > 0.0) {
            return bad("beta and temperature must be positive");
        }
        if self.sigma_fid.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma_fid must be positive");
        }
        let l = [self.lambda_perf, self.lambda_rank, self.lambda_fid, self.lambda_contrastive];
        if l.iter().any(|&v| !(v >= 0.0)) || l.iter().all(|&v| v == 0.0) {
            return bad("loss weights must be non-negative and not all zero");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad("positive_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn with_losses(mut self, losses: LossSet) -> Self {
        let w = |on: bool| if on { 1.0 } else { 0.0 };
        self.lambda_perf = w(losses.perf);
        self.lambda_rank = w(losses.rank);
        self.lambda_fid = w(losses.fid);
        self.lambda_contrastive = w(losses.contrastive);
        self
    }
}

/// Which loss terms are active, parsed from e.g. `perf,rank,fid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossSet {
    pub perf: bool,
    pub rank: bool,
    pub fid: bool,
    pub contrastive: bool,
}

impl FromStr for LossSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = LossSet::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "perf" => set.perf = true,
                "rank" => set.rank = true,
                "fid" => set.fid = true,
                "contrastive" => set.contrastive = true,
                _ => return Err(Error::InvalidConfig(format!("unknown loss {part:?} (perf, rank, fid, contrastive)"))),
            }
        }
        if set == LossSet::default() {
            return Err(Error::InvalidConfig("empty loss set".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.perf, "perf"),
            (self.rank, "rank"),
            (self.fid, "fid"),
            (self.contrastive, "contrastive"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Per-feature affine standardisation fitted on the training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("standardizer needs at least one row".into()));
        }
        let d = rows[0].len();
        if n < 2 {
            return Ok(Self {
                mean: vec![0.0; d],
                scale: vec![1.0; d],
            });
        }
        let mut mean = vec![0.0f64; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("standardizer", d, r.len()));
            }
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64 / n as f64;
            }
        }
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n as f64;
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            // constant features pass through centred but unscaled
            scale: var.iter().map(|&v| if v.sqrt() > 1e-6 { (1.0 / v.sqrt()) as f32 } else { 1.0 }).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<T: Scalar>(&self, rows: &[Vec<f32>]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("standardizer", d, r.len()));
            }
            data.extend(r.iter().zip(&self.mean).zip(&self.scale).map(|((&v, &m), &s)| T::of(((v - m) * s) as f64)));
        }
        Tensor::new(vec![rows.len(), d], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub id: String,
    pub raw: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    /// Index into [`MetaTrainingSet::datasets`] of the dataset `perf` refers to.
    pub dataset: usize,
    pub raw: Vec<f32>,
    pub perf: f64,
}

/// Everything the meta-space trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainingSet {
    pub datasets: Vec<MetaDataset>,
    pub models: Vec<MetaModel>,
    /// Pairwise FID between `datasets`.
    pub fid: Vec<Vec<f64>>,
}

impl MetaTrainingSet {
    pub fn validate(&self) -> Result<()> {
        let nd = self.datasets.len();
        if nd == 0 {
            return Err(Error::Degenerate("meta-space training set has no datasets".into()));
        }
        let mut counts = vec![0usize; nd];
        for m in &self.models {
            if m.dataset >= nd {
                return Err(Error::InvalidInput(format!("model refers to dataset {} of {nd}", m.dataset)));
            }
            if !(0.0..=1.0).contains(&m.perf) {
                return Err(Error::InvalidInput(format!("performance {} outside [0, 1]", m.perf)));
            }
            counts[m.dataset] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c < 2) {
            return Err(Error::Degenerate(format!("dataset {} has fewer than 2 models", self.datasets[i].id)));
        }
        let md = self.models[0].raw.len();
        let dd = self.datasets[0].raw.len();
        if self.models.iter().any(|m| m.raw.len() != md) || self.datasets.iter().any(|d| d.raw.len() != dd) {
            return Err(Error::InvalidInput("inconsistent raw encoding lengths".into()));
        }
        if self.fid.len() != nd || self.fid.iter().any(|r| r.len() != nd) {
            return Err(Error::shape("FID matrix", nd, self.fid.len()));
        }
        for i in 0..nd {
            for j in 0..nd {
                let (a, b) = (self.fid[i][j], self.fid[j][i]);
                if !(a >= 0.0) || (a - b).abs() > 1e-9 * (1.0 + a.abs()) || (i == j && a != 0.0) {
                    return Err(Error::InvalidInput("FID matrix must be symmetric, non-negative, zero-diagonal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn models_of(&self, dataset: usize) -> Vec<usize> {
        (0..self.models.len()).filter(|&i| self.models[i].dataset == dataset).collect()
    }

    /// Median off-diagonal FID; falls back to 1 when every pair is identical.
    pub fn median_fid(&self) -> f64 {
        let mut v = Vec::new();
        for i in 0..self.fid.len() {
            for j in i + 1..self.fid.len() {
                v.push(self.fid[i][j]);
            }
        }
        median(&v).filter(|&m| m > 0.0).unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub perf: f64,
    pub rank: f64,
    pub fid: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Prepared inputs for one objective evaluation.
#[derive(Debug, Clone)]
pub struct MetaBatch<T: Scalar> {
    pub xm: Tensor<T>,
    pub xd: Tensor<T>,
    pub model_dataset: Vec<usize>,
    pub targets: Vec<f64>,
    /// Global model index pairs `(better, worse)` grouped by dataset.
    pub rank_pairs: Vec<Vec<(usize, usize)>>,
    /// Global model indices of contrastive positives per dataset.
    pub positives: Vec<Vec<usize>>,
    pub members: Vec<Vec<usize>>,
    pub fid: Vec<Vec<f64>>,
    pub sigma_fid: f64,
}

/// Encoders `E_m`, `E_d` and predictor `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSpace<T: Scalar = f32> {
    pub config: MetaConfig,
    pub sigma_fid: f64,
    pub em: Mlp<T>,
    pub ed: Mlp<T>,
    pub phi: Mlp<T>,
    pub model_norm: Standardizer,
    pub data_norm: Standardizer,
}

fn unit_rows<T: Scalar>(t: &Tensor<T>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = Vec::with_capacity(t.rows());
    let mut norms = Vec::with_capacity(t.rows());
    for i in 0..t.rows() {
        let r: Vec<f64> = t.row(i).iter().map(|v| v.f64()).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        rows.push(r.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    (rows, norms)
}

fn rows_to_tensor<T: Scalar>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), d], rows.iter().flatten().map(|&v| T::of(v)).collect())
}

impl<T: Scalar> MetaSpace<T> {
    pub fn init(model_norm: Standardizer, data_norm: Standardizer, config: MetaConfig, sigma_fid: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, e) = (config.hidden, config.embed_dim);
        let mlp = |dims: &[usize], out: Activation, idx: u64| {
            Mlp::init(dims, Activation::Relu, out, &mut Rng::substream(seed, Stream::Weights, idx))
        };
        Ok(Self {
            em: mlp(&[model_norm.dim(), h, e], Activation::Identity, 0),
            ed: mlp(&[data_norm.dim(), h, e], Activation::Identity, 1),
            phi: mlp(&[2 * e, h, 1], Activation::Sigmoid, 2),
            config,
            sigma_fid,
            model_norm,
            data_norm,
        })
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut v = self.em.params().to_vec();
        v.extend_from_slice(self.ed.params());
        v.extend_from_slice(self.phi.params());
        v
    }

    pub fn set_params(&mut self, params: &[Tensor<T>]) -> Result<()> {
        let (a, b) = (self.em.params().len(), self.ed.params().len());
        let c = self.phi.params().len();
        if params.len() != a + b + c {
            return Err(Error::shape("metaspace params", a + b + c, params.len()));
        }
        for (dst, src) in self
            .em
            .params_mut()
            .iter_mut()
            .chain(self.ed.params_mut())
            .chain(self.phi.params_mut())
            .zip(params)
        {
            if !dst.same_shape(src) {
                return Err(Error::shape("metaspace params", format!("{:?}", dst.shape()), format!("{:?}", src.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Unit model embeddings for raw model encodings.
    pub fn embed_models(&self, raw: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(unit_rows(&self.em.forward(&self.model_norm.apply(raw)?)?).0)
    }

    /// Unit dataset embeddings for raw dataset encodings.
    pub fn embed_datasets(&self, raw: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(unit_rows(&self.ed.forward(&self.data_norm.apply(raw)?)?).0)
    }

    /// `φ(e_m, e_d)`.
    pub fn predict(&self, model_emb: &[f64], dataset_emb: &[f64]) -> Result<f64> {
        let x: Vec<T> = model_emb.iter().chain(dataset_emb).map(|&v| T::of(v)).collect();
        let y = self.phi.forward(&Tensor::new(vec![1, x.len()], x)?)?;
        Ok(y.data()[0].f64())
    }

    /// Weighted composite loss and its gradient in [`MetaSpace::params`] order.
    pub fn objective(&self, b: &MetaBatch<T>) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
        let cfg = &self.config;
        let cm = self.em.forward_cached(&b.xm)?;
        let cd = self.ed.forward_cached(&b.xd)?;
        let (em, em_norm) = unit_rows(cm.output());
        let (ed, ed_norm) = unit_rows(cd.output());
        let e = cfg.embed_dim;
        let mut dem = vec![vec![0.0; e]; em.len()];
        let mut ded = vec![vec![0.0; e]; ed.len()];
        let mut lb = LossBreakdown::default();
        let mut phi_grads: Vec<Tensor<T>> = self.phi.params().iter().map(|p| Tensor::zeros(p.shape())).collect();

        if cfg.lambda_perf > 0.0 {
            let joined: Vec<Vec<f64>> = em
                .iter()
                .zip(&b.model_dataset)
                .map(|(m, &d)| m.iter().chain(&ed[d]).copied().collect())
                .collect();
            let cp = self.phi.forward_cached(&rows_to_tensor(&joined)?)?;
            let pred: Vec<f64> = cp.output().data().iter().map(|v| v.f64()).collect();
            let (l, g) = loss_perf(&pred, &b.targets)?;
            lb.perf = l;
            let dy = Tensor::new(vec![pred.len(), 1], g.iter().map(|&v| T::of(v * cfg.lambda_perf)).collect())?;
            let (gp, dx) = self.phi.backward(&cp, &dy)?;
            phi_grads = gp;
            for (i, &d) in b.model_dataset.iter().enumerate() {
                let row = dx.row(i);
                for t in 0..e {
                    dem[i][t] += row[t].f64();
                    ded[d][t] += row[e + t].f64();
                }
            }
        }

        if cfg.lambda_rank > 0.0 {
            let total: usize = b.rank_pairs.iter().map(|p| p.len()).sum();
            for (d, pairs) in b.rank_pairs.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                // local indices into this dataset's member list
                let members = &b.members[d];
                let local: Vec<Vec<f64>> = members.iter().map(|&i| em[i].clone()).collect();
                let pos = |g: usize| members.binary_search(&g).expect("pair within dataset");
                let lp: Vec<(usize, usize)> = pairs.iter().map(|&(j, k)| (pos(j), pos(k))).collect();
                let r = loss_rank(&ed[d], &local, &lp, cfg.beta)?;
                let w = pairs.len() as f64 / total as f64;
                lb.rank += r.loss * w;
                for t in 0..e {
                    ded[d][t] += cfg.lambda_rank * w * r.d_dataset[t];
                }
                for (li, &gi) in members.iter().enumerate() {
                    for t in 0..e {
                        dem[gi][t] += cfg.lambda_rank * w * r.d_models[li][t];
                    }
                }
            }
        }

        if cfg.lambda_fid > 0.0 && ed.len() >= 2 {
            let (l, g) = loss_fid(&ed, &b.fid, b.sigma_fid)?;
            lb.fid = l;
            for (dd, gd) in ded.iter_mut().zip(&g) {
                for t in 0..e {
                    dd[t] += cfg.lambda_fid * gd[t];
                }
            }
        }

        if cfg.lambda_contrastive > 0.0 {
            let nd = b.members.len() as f64;
            for (d, members) in b.members.iter().enumerate() {
                let local: Vec<Vec<f64>> = members.iter().map(|&i| em[i].clone()).collect();
                let pos: Vec<usize> = b.positives[d]
                    .iter()
                    .map(|g| members.binary_search(g).expect("positive within dataset"))
                    .collect();
                let r = loss_contrastive(&ed[d], &local, &pos, cfg.temperature)?;
                lb.contrastive += r.loss / nd;
                let w = cfg.lambda_contrastive / nd;
                for t in 0..e {
                    ded[d][t] += w * r.d_dataset[t];
                }
                for (li, &gi) in members.iter().enumerate() {
                    for t in 0..e {
                        dem[gi][t] += w * r.d_models[li][t];
                    }
                }
            }
        }

        lb.total = cfg.lambda_perf * lb.perf + cfg.lambda_rank * lb.rank + cfg.lambda_fid * lb.fid
            + cfg.lambda_contrastive * lb.contrastive;
        if !lb.total.is_finite() {
            return Err(Error::NonFinite(format!("meta-space loss {lb:?}")));
        }

        let back = |emb: &[Vec<f64>], norms: &[f64], de: &[Vec<f64>]| -> Result<Tensor<T>> {
            let rows: Vec<Vec<f64>> = emb
                .iter()
                .zip(norms)
                .zip(de)
                .map(|((u, &n), g)| normalize_backward(u, n, g))
                .collect();
            rows_to_tensor(&rows)
        };
        let (gm, _) = self.em.backward(&cm, &back(&em, &em_norm, &dem)?)?;
        let (gd, _) = self.ed.backward(&cd, &back(&ed, &ed_norm, &ded)?)?;
        let mut grads = gm;
        grads.extend(gd);
        grads.extend(phi_grads);
        Ok((lb, grads))
    }

    pub fn cast<U: Scalar>(&self) -> MetaSpace<U> {
        MetaSpace {
            config: self.config.clone(),
            sigma_fid: self.sigma_fid,
            em: self.em.cast(),
            ed: self.ed.cast(),
            phi: self.phi.cast(),
            model_norm: self.model_norm.clone(),
            data_norm: self.data_norm.clone(),
        }
    }
}

/// Up to `max_pairs` distinct `(better, worse)` pairs with a gap above
/// `min_gap`, drawn uniformly.
pub fn sample_rank_pairs(members: &[usize], perf: &[f64], max_pairs: usize, min_gap: f64, rng: &mut Rng) -> Vec<(usize, usize)> {
    let n = members.len();
    let orient = |a: usize, b: usize| {
        let (pa, pb) = (perf[members[a]], perf[members[b]]);
        if pa - pb > min_gap {
            Some((members[a], members[b]))
        } else if pb - pa > min_gap {
            Some((members[b], members[a]))
        } else {
            None
        }
    };
    if n * (n - 1) / 2 <= 4 * max_pairs {
        let mut all: Vec<(usize, usize)> = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                all.extend(orient(a, b));
            }
        }
        if all.len() <= max_pairs {
            return all;
        }
        let mut pick = rng.sample_indices(all.len(), max_pairs);
        pick.sort_unstable();
        return pick.into_iter().map(|i| all[i]).collect();
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(max_pairs);
    let mut attempts = 0;
    while out.len() < max_pairs && attempts < max_pairs * 64 {
        attempts += 1;
        let a = rng.below(n);
        let b = rng.below(n);
        if a == b {
            continue;
        }
        if let Some(p) = orient(a, b) {
            if seen.insert(p) {
                out.push(p);
            }
        }
    }
    out
}

/// Result of [`train_metaspace`].
#[derive(Debug, Clone)]
pub struct TrainedMetaSpace {
    pub space: MetaSpace,
    pub curve: Vec<EpochLoss>,
    pub fid_skipped: bool,
}

/// Assemble the static part of a batch (rank pairs are drawn per epoch).
pub fn prepare_batch<T: Scalar>(set: &MetaTrainingSet, ms: &MetaSpace<T>) -> Result<MetaBatch<T>> {
    let model_raw: Vec<Vec<f32>> = set.models.iter().map(|m| m.raw.clone()).collect();
    let data_raw: Vec<Vec<f32>> = set.datasets.iter().map(|d| d.raw.clone()).collect();
    let members: Vec<Vec<usize>> = (0..set.datasets.len()).map(|d| set.models_of(d)).collect();
    let perf: Vec<f64> = set.models.iter().map(|m| m.perf).collect();
    let positives = members
        .iter()
        .map(|mem| {
            let vals: Vec<f64> = mem.iter().map(|&i| perf[i]).collect();
            top_quantile(&vals, ms.config.positive_fraction).into_iter().map(|l| mem[l]).collect()
        })
        .collect();
    Ok(MetaBatch {
        xm: ms.model_norm.apply(&model_raw)?,
        xd: ms.data_norm.apply(&data_raw)?,
        model_dataset: set.models.iter().map(|m| m.dataset).collect(),
        targets: perf,
        rank_pairs: vec![Vec::new(); members.len()],
        positives,
        members,
        fid: set.fid.clone(),
        sigma_fid: ms.sigma_fid,
    })
}

/// Full-batch Adam on the weighted composite loss; one step per epoch.
pub fn train_metaspace(set: &MetaTrainingSet, config: &MetaConfig, seed: u64) -> Result<TrainedMetaSpace> {
    config.validate()?;
    set.validate()?;
    let model_norm = Standardizer::fit(&set.models.iter().map(|m| m.raw.clone()).collect::<Vec<_>>())?;
    let data_norm = Standardizer::fit(&set.datasets.iter().map(|d| d.raw.clone()).collect::<Vec<_>>())?;
    let sigma = config.sigma_fid.unwrap_or_else(|| set.median_fid());
    let mut cfg = config.clone();
    let fid_skipped = set.datasets.len() < 2 && cfg.lambda_fid > 0.0;
    if fid_skipped {
        log::warn!("single training dataset: FID loss skipped");
        cfg.lambda_fid = 0.0;
        if cfg.lambda_perf + cfg.lambda_rank + cfg.lambda_contrastive == 0.0 {
            return Err(Error::Degenerate("only the FID loss was requested and it needs >= 2 datasets".into()));
        }
    }
    let mut ms = MetaSpace::<f32>::init(model_norm, data_norm, cfg.clone(), sigma, seed)?;
    let mut batch = prepare_batch(set, &ms)?;
    let mut params = ms.params();
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut rng = Rng::stream(seed, Stream::Sampling);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.lambda_rank > 0.0 {
            for (d, mem) in batch.members.iter().enumerate() {
                batch.rank_pairs[d] = sample_rank_pairs(mem, &batch.targets, cfg.max_pairs, cfg.min_gap, &mut rng);
            }
        }
        let (loss, grads) = ms.objective(&batch)?;
        adam.step(&mut params, &grads)?;
        ms.set_params(&params)?;
        curve.push(EpochLoss { epoch, loss });
    }
    ms.config = config.clone();
    Ok(TrainedMetaSpace {
        space: ms,
        curve,
        fid_skipped,
    })
}

pub const METASPACE_SCHEMA: &str = "mednns-metaspace/1";

/// Structured header stored next to the meta-space weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaHeader {
    pub schema: String,
    pub model_dim: usize,
    pub data_dim: usize,
    pub config: MetaConfig,
    pub sigma_fid: f64,
    pub dataset_ids: Vec<String>,
    pub zoo_fingerprint: String,
    pub zoo_path: String,
    pub index_path: String,
    pub extractor_seed: u64,
    pub probe_seed: u64,
    pub n_img: usize,
    pub data_seed: u64,
}

impl MetaSpace {
    pub fn save(&self, path: impl AsRef<Path>, header: &MetaHeader) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = self.params();
        for v in [&self.model_norm.mean, &self.model_norm.scale, &self.data_norm.mean, &self.data_norm.scale] {
            tensors.push(Tensor::vector(v.clone()));
        }
        write_tensors(path, &tensors)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(header)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, MetaHeader)> {
        let path = path.as_ref();
        let header: MetaHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if header.schema != METASPACE_SCHEMA {
            return Err(Error::Format(format!("unknown meta-space schema {:?}", header.schema)));
        }
        let mut tensors = read_tensors(path)?;
        if tensors.len() < 4 {
            return Err(Error::Format("meta-space checkpoint too short".into()));
        }
        let tail = tensors.split_off(tensors.len() - 4);
        let mut it = tail.into_iter().map(|t| t.into_data());
        let model_norm = Standardizer {
            mean: it.next().unwrap(),
            scale: it.next().unwrap(),
        };
        let data_norm = Standardizer {
            mean: it.next().unwrap(),
            scale: it.next().unwrap(),
        };
        if model_norm.dim() != header.model_dim || data_norm.dim() != header.data_dim {
            return Err(Error::Format("meta-space normaliser dims disagree with header".into()));
        }
        let mut ms = MetaSpace::init(model_norm, data_norm, header.config.clone(), header.sigma_fid, 0)?;
        ms.set_params(&tensors)?;
        Ok((ms, header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn toy_set(nd: usize, per: usize, seed: u64) -> MetaTrainingSet {
        let mut rng = Rng::new(seed);
        let datasets: Vec<MetaDataset> = (0..nd)
            .map(|i| MetaDataset {
                id: format!("d{i}"),
                raw: (0..5).map(|_| rng.normal() as f32).collect(),
            })
            .collect();
        let mut models = Vec::new();
        for d in 0..nd {
            for _ in 0..per {
                models.push(MetaModel {
                    dataset: d,
                    raw: (0..6).map(|_| rng.normal() as f32).collect(),
                    perf: rng.uniform(),
                });
            }
        }
        let fid = (0..nd)
            .map(|i| (0..nd).map(|j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 }).collect())
            .collect();
        MetaTrainingSet { datasets, models, fid }
    }

    fn small_config() -> MetaConfig {
        MetaConfig {
            hidden: 16,
            embed_dim: 4,
            lambda_contrastive: 1.0,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let set = toy_set(3, 4, seed);
            let mn = Standardizer::fit(&set.models.iter().map(|m| m.raw.clone()).collect::<Vec<_>>()).unwrap();
            let dn = Standardizer::fit(&set.datasets.iter().map(|d| d.raw.clone()).collect::<Vec<_>>()).unwrap();
            let ms = MetaSpace::<f64>::init(mn, dn, small_config(), set.median_fid(), seed).unwrap();
            let mut b = prepare_batch(&set, &ms).unwrap();
            let mut rng = Rng::new(seed);
            for (d, mem) in b.members.iter().enumerate() {
                b.rank_pairs[d] = sample_rank_pairs(mem, &b.targets, 64, 1e-4, &mut rng);
            }
            let (_, g) = ms.objective(&b).unwrap();
            let err = grad_check(
                |p| {
                    let mut m = ms.clone();
                    m.set_params(p).unwrap();
                    m.objective(&b).unwrap().0.total
                },
                &ms.params(),
                &g,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn loss_set_parsing() {
        let s: LossSet = "perf,rank,fid".parse().unwrap();
        assert!(s.perf && s.rank && s.fid && !s.contrastive);
        assert_eq!(s.to_string(), "perf,rank,fid");
        assert!("rank,bogus".parse::<LossSet>().is_err());
        assert!("".parse::<LossSet>().is_err());
    }

    #[test]
    fn perf_only_memorises_small_zoo() {
        let set = toy_set(2, 10, 4);
        let cfg = MetaConfig {
            epochs: 200,
            ..MetaConfig::default().with_losses("perf".parse().unwrap())
        };
        let out = train_metaspace(&set, &cfg, 1).unwrap();
        assert!(out.curve.last().unwrap().loss.perf < 0.01, "{:?}", out.curve.last());
    }

    #[test]
    fn single_dataset_skips_fid() {
        let set = toy_set(1, 5, 2);
        let cfg = MetaConfig {
            epochs: 5,
            ..MetaConfig::default()
        };
        let out = train_metaspace(&set, &cfg, 1).unwrap();
        assert!(out.fid_skipped);
        assert!(out.curve.iter().all(|c| c.loss.fid == 0.0));
    }

    #[test]
    fn embeddings_are_unit() {
        let set = toy_set(2, 3, 1);
        let out = train_metaspace(&set, &MetaConfig { epochs: 3, ..MetaConfig::default() }, 0).unwrap();
        for e in out.space.embed_models(&set.models.iter().map(|m| m.raw.clone()).collect::<Vec<_>>()).unwrap() {
            assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_pairs_respect_gap() {
        let perf = vec![0.5, 0.5, 0.7, 0.1];
        let mut rng = Rng::new(0);
        let p = sample_rank_pairs(&[0, 1, 2, 3], &perf, 64, 1e-4, &mut rng);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&(j, k)| perf[j] - perf[k] > 1e-4));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(2, 3, 1);
        let out = train_metaspace(&set, &MetaConfig { epochs: 2, ..MetaConfig::default() }, 0).unwrap();
        let header = MetaHeader {
            schema: METASPACE_SCHEMA.into(),
            model_dim: 6,
            data_dim: 5,
            config: out.space.config.clone(),
            sigma_fid: out.space.sigma_fid,
            dataset_ids: vec!["d0".into(), "d1".into()],
            zoo_fingerprint: "x".into(),
            zoo_path: "zoo.jsonl".into(),
            index_path: "index.mnw".into(),
            extractor_seed: 1,
            probe_seed: 2,
            n_img: 256,
            data_seed: 3,
        };
        let p = dir.path().join("ms.mnw");
        out.space.save(&p, &header).unwrap();
        let (back, h) = MetaSpace::load(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, out.space);
    }
}
