use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use mednns::encoding::{encode_dataset, FrozenExtractor};
use mednns::metaspace::train_metaspace as run_train_metaspace;
use mednns::numerics::Tensor;
use mednns::pipeline::{build_index, eval_loo as run_eval_loo, meta_training_set, Encoders};
use mednns::report::{fmt_f, Table};
use mednns::retrieval::{embed_new_dataset, query as run_query, topk_select};
use mednns::statistics::fid as fid_of;
use mednns::supernet::{train_supernet as run_train_supernet, SplitSets};
use mednns::zoo::{audit_rank as run_audit_rank, build_zoo as run_build_zoo, SupernetSource, ZooDataset, ZooMeta};
use mednns::{
    Config, DatasetDescriptor, Error, FamilyConfig, LossSet, MetaSpace, ModelIndex, Result, SearchSpace,
    SupernetCheckpoint, ZooManifest, ZooPolicy,
};

pub struct Output {
    pub csv: bool,
}

impl Output {
    fn table(&self, t: &Table) {
        if self.csv {
            print!("{}", t.to_csv());
        } else {
            print!("{}", t.to_text());
        }
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `target` relative to `base_dir` when it lies below it, otherwise absolute.
fn relative_ref(base_dir: &Path, target: &Path) -> Result<String> {
    let base = base_dir.canonicalize()?;
    let t = target.canonicalize()?;
    let p = t.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(t);
    Ok(p.to_string_lossy().replace('\\', "/"))
}

fn resolve(base_dir: &Path, r: &str) -> PathBuf {
    let p = Path::new(r);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn check_shape(space: &SearchSpace, ds: &DatasetDescriptor) -> Result<()> {
    if ds.input_shape() != space.input_shape || ds.classes as usize != space.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset {} is {:?} with {} classes; the space expects {:?} with {}",
            ds.id,
            ds.input_shape(),
            ds.classes,
            space.input_shape,
            space.num_classes
        )));
    }
    Ok(())
}

fn load_dataset(dir: &Path, id: &str) -> Result<DatasetDescriptor> {
    DatasetDescriptor::read(dir.join(format!("{id}.mnds")))
}

/// Every dataset of the zoo, loaded from `dir` and split.
fn load_splits(zoo: &ZooManifest, dir: &Path) -> Result<BTreeMap<String, SplitSets>> {
    zoo.dataset_ids()
        .into_iter()
        .map(|id| {
            let ds = load_dataset(dir, &id)?;
            check_shape(&zoo.space, &ds)?;
            Ok((id, SplitSets::new(&ds)?))
        })
        .collect()
}

/// Supernet weights keyed by the manifest's references.
fn load_supernets(zoo: &ZooManifest, zoo_path: &Path) -> Result<BTreeMap<String, Vec<Tensor>>> {
    let base = dir_of(zoo_path);
    let mut out = BTreeMap::new();
    for e in &zoo.entries {
        if !out.contains_key(&e.supernet_ref) {
            let ck = SupernetCheckpoint::load(resolve(&base, &e.supernet_ref))
                .map_err(|err| match err {
                    Error::Io(_) => Error::MissingSupernet(e.supernet_ref.clone()),
                    other => other,
                })?;
            if ck.meta.space != zoo.space {
                return Err(Error::FingerprintMismatch {
                    expected: zoo.space.fingerprint(),
                    found: ck.meta.space_fingerprint,
                });
            }
            out.insert(e.supernet_ref.clone(), ck.theta);
        }
    }
    Ok(out)
}

pub fn gen_data(cfg: &Config, spec: Option<&Path>, dir: &Path, seed: Option<u64>, out: &Output) -> Result<()> {
    let family: FamilyConfig = match spec {
        Some(p) => read_toml(p)?,
        None => cfg.family.clone(),
    };
    let data = family.generate(seed.unwrap_or(cfg.seed))?;
    fs::create_dir_all(dir)?;
    let mut t = Table::new(["dataset", "samples", "classes", "shift", "file"]);
    for (ds, shift) in data.iter().zip(&family.shifts) {
        let path = dir.join(format!("{}.mnds", ds.id));
        ds.write(&path)?;
        t.push([
            ds.id.clone(),
            ds.len().to_string(),
            ds.classes.to_string(),
            format!("{shift}"),
            path.display().to_string(),
        ]);
    }
    out.table(&t);
    Ok(())
}

pub fn train_supernet(
    cfg: &Config,
    dataset: &Path,
    space: Option<&Path>,
    path: &Path,
    seed: Option<u64>,
    out: &Output,
) -> Result<()> {
    let space: SearchSpace = match space {
        Some(p) => read_toml(p)?,
        None => cfg.space.clone(),
    };
    space.validate()?;
    let ds = DatasetDescriptor::read(dataset)?;
    check_shape(&space, &ds)?;
    let seed = seed.unwrap_or(cfg.seed);
    let trained = run_train_supernet(&space, &SplitSets::new(&ds)?, &cfg.supernet, seed)?;
    let ck = SupernetCheckpoint::new(&ds.id, &space, seed, &cfg.supernet, trained);
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    ck.save(path)?;
    let mut t = Table::new(["epoch", "stage", "loss", "train_acc", "val_acc"]);
    for l in &ck.meta.log {
        t.push([l.epoch.to_string(), l.stage.to_string(), fmt_f(l.train_loss), fmt_f(l.train_acc), fmt_f(l.val_acc)]);
    }
    out.table(&t);
    Ok(())
}

pub fn build_zoo(
    cfg: &Config,
    supernets: &Path,
    data: &Path,
    policy: Option<ZooPolicy>,
    path: &Path,
    seed: Option<u64>,
    out: &Output,
) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(supernets)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "mnw"));
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .mnw checkpoints in {}", supernets.display())));
    }
    let ckpts: Vec<SupernetCheckpoint> = files.iter().map(SupernetCheckpoint::load).collect::<Result<_>>()?;
    let space = ckpts[0].meta.space.clone();
    if let Some(c) = ckpts.iter().find(|c| c.meta.space != space) {
        return Err(Error::FingerprintMismatch {
            expected: space.fingerprint(),
            found: c.meta.space_fingerprint.clone(),
        });
    }
    let mut sources = Vec::with_capacity(ckpts.len());
    for c in &ckpts {
        let ds = load_dataset(data, &c.meta.dataset_id)?;
        check_shape(&space, &ds)?;
        sources.push((c.meta.dataset_id.clone(), SplitSets::new(&ds)?));
    }

    let base = dir_of(path);
    fs::create_dir_all(&base)?;
    let refs: Vec<String> = files.iter().map(|f| relative_ref(&base, f)).collect::<Result<_>>()?;
    let table: BTreeMap<String, SupernetSource<'_>> = ckpts
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
    let datasets: Vec<ZooDataset<'_>> = sources.iter().map(|(id, s)| ZooDataset { id, data: s }).collect();
    let policy = policy.unwrap_or(cfg.zoo.policy);
    let meta = ZooMeta {
        seed: seed.unwrap_or(cfg.seed),
        policy,
        supernet_seeds: ckpts.iter().map(|c| (c.meta.dataset_id.clone(), c.meta.seed)).collect(),
        schedule: Some(ckpts[0].meta.schedule.clone()),
    };
    let zoo = run_build_zoo(&space, &datasets, &table, policy, meta)?;
    zoo.write(path)?;

    let mut t = Table::new(["dataset", "entries", "mean_P_hat", "max_P_hat"]);
    for id in zoo.dataset_ids() {
        let p: Vec<f64> = zoo.indices_for(&id).iter().map(|&i| zoo.entries[i].estimated_perf).collect();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        t.push([id, p.len().to_string(), fmt_f(mean), fmt_f(max)]);
    }
    out.table(&t);
    Ok(())
}

pub fn audit_rank(
    cfg: &Config,
    zoo_path: &Path,
    k: Option<usize>,
    data: &Path,
    path: Option<&Path>,
    seed: Option<u64>,
    out: &Output,
) -> Result<()> {
    let mut zoo = ZooManifest::read(zoo_path)?;
    let splits = load_splits(&zoo, data)?;
    let mut audit = cfg.audit.clone();
    if let Some(k) = k {
        audit.k = k;
    }
    let report = run_audit_rank(&mut zoo, &splits, &audit, seed.unwrap_or(cfg.seed))?;
    let mut t = Table::new(["dataset", "n", "spearman"]);
    for r in &report {
        let rho = r.rho.value().map(fmt_f).unwrap_or_else(|| "degenerate".into());
        t.push([r.dataset_id.clone(), r.n.to_string(), rho]);
    }
    out.table(&t);
    if let Some(p) = path {
        zoo.write(p)?;
    }
    Ok(())
}

/// `<stem>.index.mnw` next to the meta-space checkpoint.
fn index_path_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metaspace".into());
    dir_of(path).join(format!("{stem}.index.mnw"))
}

pub fn train_metaspace(
    cfg: &Config,
    zoo_path: &Path,
    data: &Path,
    losses: Option<LossSet>,
    path: &Path,
    seed: Option<u64>,
    out: &Output,
) -> Result<()> {
    let zoo = ZooManifest::read(zoo_path)?;
    let thetas = load_supernets(&zoo, zoo_path)?;
    let enc = Encoders::new(&zoo.space, &cfg.encoding)?;
    let model_raw = enc.encode_zoo(&zoo, |r| thetas.get(r).map(Vec::as_slice))?;
    let ids = zoo.dataset_ids();
    let datasets: Vec<DatasetDescriptor> = ids.iter().map(|id| load_dataset(data, id)).collect::<Result<_>>()?;
    let data_enc = enc.encode_datasets(&datasets.iter().collect::<Vec<_>>())?;
    let set = meta_training_set(&zoo, &model_raw, &ids.iter().cloned().zip(data_enc).collect())?;

    let meta_cfg = match losses {
        Some(l) => cfg.metaspace.clone().with_losses(l),
        None => cfg.metaspace.clone(),
    };
    let trained = run_train_metaspace(&set, &meta_cfg, seed.unwrap_or(cfg.seed))?;
    let index = build_index(&trained, &zoo, &model_raw)?;

    let base = dir_of(path);
    fs::create_dir_all(&base)?;
    let index_path = index_path_for(path);
    index.save(&index_path)?;
    let header = enc.header(
        &trained,
        &set,
        &zoo,
        &relative_ref(&base, zoo_path)?,
        &relative_ref(&base, &index_path)?,
    );
    trained.space.save(path, &header)?;

    let mut t = Table::new(["epoch", "total", "perf", "rank", "fid", "contrastive"]);
    let n = trained.curve.len();
    for e in trained.curve.iter().filter(|e| e.epoch == 0 || (e.epoch + 1) % 50 == 0 || e.epoch + 1 == n) {
        let l = &e.loss;
        t.push([e.epoch.to_string(), fmt_f(l.total), fmt_f(l.perf), fmt_f(l.rank), fmt_f(l.fid), fmt_f(l.contrastive)]);
    }
    out.table(&t);
    if trained.fid_skipped {
        log::warn!("FID loss skipped: fewer than two training datasets");
    }
    Ok(())
}

pub fn query(cfg: &Config, ms_path: &Path, dataset: &Path, topk: usize, finetune: bool, out: &Output) -> Result<()> {
    let (ms, header): (MetaSpace, _) = MetaSpace::load(ms_path)?;
    let base = dir_of(ms_path);
    let zoo_path = resolve(&base, &header.zoo_path);
    let zoo = ZooManifest::read(&zoo_path)?;
    if zoo.fingerprint() != header.zoo_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: header.zoo_fingerprint,
            found: zoo.fingerprint(),
        });
    }
    let index = ModelIndex::load(resolve(&base, &header.index_path), &zoo)?;
    let ds = DatasetDescriptor::read(dataset)?;
    let (c, h, w) = zoo.space.input_shape;
    if ds.input_shape() != zoo.space.input_shape {
        return Err(Error::InvalidInput(format!(
            "dataset {} is {:?}; the zoo expects {:?}",
            ds.id,
            ds.input_shape(),
            zoo.space.input_shape
        )));
    }
    let extractor = FrozenExtractor::new(c * h * w, header.data_dim, header.extractor_seed);
    let d_emb = embed_new_dataset(&ds, &extractor, &ms, header.n_img, header.data_seed)?;
    let q = run_query(&index, &d_emb, topk)?;
    if q.clamped {
        eprintln!("warning: topk {topk} clamped to {}", q.ranked.len());
    }

    if !finetune {
        let mut t = Table::new(["rank", "model", "source", "arch", "cosine"]);
        for (r, &(i, cos)) in q.ranked.iter().enumerate() {
            let e = &zoo.entries[i];
            t.push([(r + 1).to_string(), i.to_string(), e.dataset_id.clone(), e.arch.to_string(), fmt_f(cos)]);
        }
        out.table(&t);
        return Ok(());
    }

    if ds.classes as usize != zoo.space.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset {} has {} classes; the zoo heads have {}",
            ds.id, ds.classes, zoo.space.num_classes
        )));
    }
    let thetas = load_supernets(&zoo, &zoo_path)?;
    let sel = topk_select(&q, &zoo, |r| thetas.get(r).map(Vec::as_slice), &SplitSets::new(&ds)?, &cfg.finetune)?;
    let mut t = Table::new(["rank", "model", "source", "arch", "cosine", "val_acc", "selected"]);
    for (r, cand) in sel.candidates.iter().enumerate() {
        let e = &zoo.entries[cand.manifest_index];
        t.push([
            (r + 1).to_string(),
            cand.manifest_index.to_string(),
            e.dataset_id.clone(),
            e.arch.to_string(),
            fmt_f(cand.cosine),
            fmt_f(cand.val_acc),
            if cand.manifest_index == sel.chosen { "*" } else { "" }.to_string(),
        ]);
    }
    out.table(&t);
    Ok(())
}

pub fn eval_loo(cfg: &Config, family: Option<&Path>, seeds: usize, dir: Option<&Path>, out: &Output) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(p) = family {
        cfg.family = read_toml(p)?;
    }
    let report = run_eval_loo(&cfg, seeds, dir)?;
    out.table(&report.summary_table());
    let mean = report.mean_topk();
    let monotone = mean.windows(2).all(|w| w[0] <= w[1]);
    eprintln!(
        "runs: {}  near-source rate: {:.4}  monotone: {}",
        report.runs.len(),
        report.near_hit_rate(),
        if monotone { "yes" } else { "no" }
    );
    Ok(())
}

pub fn fid(cfg: &Config, a: &Path, b: &Path) -> Result<()> {
    let da = DatasetDescriptor::read(a)?;
    let db = DatasetDescriptor::read(b)?;
    if da.input_shape() != db.input_shape() {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {:?} vs {:?}",
            da.input_shape(),
            db.input_shape()
        )));
    }
    let (c, h, w) = da.input_shape();
    let e = &cfg.encoding;
    let extractor = FrozenExtractor::new(c * h * w, e.feature_dim, e.extractor_seed);
    let sa = encode_dataset(&da, &extractor, e.n_img, e.data_seed)?.stats;
    let sb = encode_dataset(&db, &extractor, e.n_img, e.data_seed)?.stats;
    println!("{:.6}", fid_of(&sa, &sb)?);
    Ok(())
}
