//! Raw model encodings (flattened architecture plus a fixed-noise functional
//! probe) and raw dataset encodings from a frozen random feature extractor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::numerics::{read_tensors, sidecar_path, write_tensors, Activation, Mlp, Rng, Stream, Tensor};
use crate::statistics::{fit_gaussian, GaussianStats};
use crate::supernet::{apply_mask, ArchitectureConfig, Mask, SearchSpace};

pub const DEFAULT_N_Z: usize = 8;
pub const DEFAULT_N_IMG: usize = 256;
pub const DEFAULT_FEATURE_DIM: usize = 32;
const EXTRACTOR_HIDDEN: usize = 64;

/// Fixed Gaussian noise batch shared by every model encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalProbe {
    pub seed: u64,
    pub z: Vec<Vec<f32>>,
}

impl FunctionalProbe {
    pub fn new(space: &SearchSpace, n_z: usize, seed: u64) -> Result<Self> {
        if n_z == 0 {
            return Err(Error::InvalidConfig("probe needs n_z >= 1".into()));
        }
        let (c, h, w) = space.input_shape;
        let mut rng = Rng::stream(seed, Stream::Probe);
        let z = (0..n_z).map(|_| (0..c * h * w).map(|_| rng.normal() as f32).collect()).collect();
        Ok(Self { seed, z })
    }

    pub fn n_z(&self) -> usize {
        self.z.len()
    }
}

/// `[depth₁, width₁, expansion₁, depth₂, …]`.
pub fn encode_architecture(space: &SearchSpace, cfg: &ArchitectureConfig) -> Result<Vec<f32>> {
    space.check(cfg)?;
    Ok(cfg
        .stages
        .iter()
        .flat_map(|s| [s.depth as f32, s.width as f32, s.expansion as f32])
        .collect())
}

/// Mean pooled pre-classifier features of `m ⊙ Θ` over the probe batch.
/// The vector has the maximal layout's width; masked channels are zero.
pub fn encode_functional(space: &SearchSpace, theta: &[Tensor], mask: &Mask, probe: &FunctionalProbe) -> Result<Vec<f32>> {
    let net = apply_mask(space, theta, mask)?;
    let mut acc = vec![0.0f64; space.feature_dim()];
    for z in &probe.z {
        for (a, f) in acc.iter_mut().zip(net.features(z)?) {
            *a += f;
        }
    }
    Ok(acc.into_iter().map(|v| (v / probe.n_z() as f64) as f32).collect())
}

/// Concatenated raw model encoding.
pub fn encode_model(
    space: &SearchSpace,
    theta: &[Tensor],
    cfg: &ArchitectureConfig,
    probe: &FunctionalProbe,
) -> Result<Vec<f32>> {
    let mut v = encode_architecture(space, cfg)?;
    v.extend(encode_functional(space, theta, &space.config_to_mask(cfg)?, probe)?);
    Ok(v)
}

/// Frozen, seeded random feature network shared by all datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenExtractor {
    seed: u64,
    mlp: Mlp,
}

impl FrozenExtractor {
    pub fn new(input_len: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, Stream::Extractor);
        let mlp = Mlp::init(
            &[input_len, EXTRACTOR_HIDDEN, feature_dim],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        Self { seed, mlp }
    }

    pub fn for_space(space: &SearchSpace, seed: u64) -> Self {
        let (c, h, w) = space.input_shape;
        Self::new(c * h * w, DEFAULT_FEATURE_DIM, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Features for the listed images, row-major `[n × d_f]`.
    pub fn features(&self, ds: &DatasetDescriptor, indices: &[usize]) -> Result<Vec<f64>> {
        if ds.pixels() != self.input_len() {
            return Err(Error::shape("extractor input", self.input_len(), ds.pixels()));
        }
        let mut x = Vec::with_capacity(indices.len() * ds.pixels());
        for &i in indices {
            x.extend(ds.image_f32(i));
        }
        let out = self.mlp.forward(&Tensor::new(vec![indices.len(), ds.pixels()], x)?)?;
        Ok(out.data().iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDatasetEncoding {
    pub mean: Vec<f32>,
    pub stats: GaussianStats,
    pub n_used: usize,
}

/// Mean frozen features over `min(n_img, |D|)` images drawn without
/// replacement, plus the fitted Gaussian used for FID.
pub fn encode_dataset(ds: &DatasetDescriptor, extractor: &FrozenExtractor, n_img: usize, seed: u64) -> Result<RawDatasetEncoding> {
    if ds.is_empty() {
        return Err(Error::InvalidInput(format!("dataset {} is empty", ds.id)));
    }
    let indices: Vec<usize> = if n_img >= ds.len() {
        (0..ds.len()).collect()
    } else {
        let mut v = Rng::stream(seed, Stream::Data).sample_indices(ds.len(), n_img);
        v.sort_unstable();
        v
    };
    if indices.len() < 2 {
        return Err(Error::InvalidInput("dataset encoding needs at least 2 images".into()));
    }
    let d = extractor.feature_dim();
    let feats = extractor.features(ds, &indices)?;
    let stats = fit_gaussian(&feats, indices.len(), d)?;
    Ok(RawDatasetEncoding {
        mean: stats.mean.iter().map(|&v| v as f32).collect(),
        stats,
        n_used: indices.len(),
    })
}

/// Cache key for a model encoding.
pub fn model_key(dataset_id: &str, cfg: &ArchitectureConfig) -> String {
    format!("{dataset_id}|{}", cfg.fingerprint())
}

/// Keyed vector store persisted as a weight container plus a key list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodingCache {
    pub entries: BTreeMap<String, Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheKeys {
    keys: Vec<String>,
}

impl EncodingCache {
    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, key: String, value: Vec<f32>) {
        self.entries.insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors: Vec<Tensor> = self.entries.values().map(|v| Tensor::vector(v.clone())).collect();
        write_tensors(path, &tensors)?;
        let keys = CacheKeys {
            keys: self.entries.keys().cloned().collect(),
        };
        fs::write(sidecar_path(path), serde_json::to_string(&keys)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tensors = read_tensors(path)?;
        let keys: CacheKeys = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if keys.keys.len() != tensors.len() {
            return Err(Error::Format(format!(
                "encoding cache: {} keys for {} tensors",
                keys.keys.len(),
                tensors.len()
            )));
        }
        Ok(Self {
            entries: keys.keys.into_iter().zip(tensors.into_iter().map(|t| t.into_data())).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticFamilySpec};
    use crate::statistics::fid;
    use crate::supernet::{Network, StageChoice};

    #[test]
    fn architecture_flatten() {
        let space = SearchSpace::default();
        let st = |depth, width, expansion| StageChoice { depth, width, expansion };
        let cfg = ArchitectureConfig {
            stages: vec![st(1, 0.5, 1.0), st(2, 1.0, 1.0), st(1, 0.5, 0.5)],
        };
        assert_eq!(
            encode_architecture(&space, &cfg).unwrap(),
            vec![1., 0.5, 1.0, 2., 1.0, 1.0, 1., 0.5, 0.5]
        );
        assert_eq!(encode_architecture(&space, &space.maximal_config()).unwrap(), [2., 1., 1.].repeat(3));
    }

    #[test]
    fn masked_out_block_does_not_change_func_part() {
        let space = SearchSpace::default();
        let theta = Network::<f32>::init(space.supernet_shape(), &mut Rng::new(8)).params;
        let probe = FunctionalProbe::new(&space, DEFAULT_N_Z, 1).unwrap();
        let mut cfg = space.maximal_config();
        cfg.stages[2].depth = 1;
        let mask = space.config_to_mask(&cfg).unwrap();
        // same subnet, different weights in the masked second block
        let mut other = theta.clone();
        let (w1, w2) = space.supernet_shape().layout().blocks[2][1];
        other[w1].fill(3.0);
        other[w2].fill(-2.0);
        let fa = encode_functional(&space, &theta, &mask, &probe).unwrap();
        let fb = encode_functional(&space, &other, &mask, &probe).unwrap();
        assert_eq!(fa.len(), 32);
        assert_eq!(fa, fb);
        assert_eq!(fa, encode_functional(&space, &theta, &mask, &probe).unwrap());
        cfg.stages[2].width = 0.5;
        let fc = encode_functional(&space, &theta, &space.config_to_mask(&cfg).unwrap(), &probe).unwrap();
        assert!(fc[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_blocks_leave_stem_response() {
        let space = SearchSpace::default();
        let mut theta = Network::<f32>::init(space.supernet_shape(), &mut Rng::new(2)).params;
        let layout = space.supernet_shape().layout();
        for &(w1, w2) in layout.blocks.iter().flatten() {
            theta[w1].fill(0.0);
            theta[w2].fill(0.0);
        }
        let probe = FunctionalProbe::new(&space, 4, 3).unwrap();
        let cfgs = space.enumerate();
        let base = encode_functional(&space, &theta, &space.config_to_mask(&cfgs[511]).unwrap(), &probe).unwrap();
        // configs that differ only in depth/expansion share everything else
        for cfg in cfgs.iter().filter(|c| c.stages.iter().all(|s| s.width == 1.0)) {
            let f = encode_functional(&space, &theta, &space.config_to_mask(cfg).unwrap(), &probe).unwrap();
            assert_eq!(f, base, "{cfg}");
        }
    }

    #[test]
    fn dataset_encoding_properties() {
        let spec = SyntheticFamilySpec::default();
        let ds = gen_synthetic("d", &spec, 120, 5).unwrap();
        let ex = FrozenExtractor::new(256, 32, 9);
        let a = encode_dataset(&ds, &ex, 500, 1).unwrap();
        assert_eq!(a.n_used, 120);
        assert!(fid(&a.stats, &a.stats).unwrap().abs() < 1e-6);
        assert_eq!(a, encode_dataset(&ds, &ex, 500, 2).unwrap());
        let sub = encode_dataset(&ds, &ex, 50, 4).unwrap();
        assert_eq!(sub.n_used, 50);
        assert_eq!(sub, encode_dataset(&ds, &ex, 50, 4).unwrap());
    }

    #[test]
    fn identical_images_give_ridge_covariance() {
        let ds = DatasetDescriptor::new("same", 2, (1, 4, 4), vec![100; 16 * 6], vec![0, 1, 0, 1, 0, 1]).unwrap();
        let ex = FrozenExtractor::new(16, 8, 1);
        let enc = encode_dataset(&ds, &ex, 256, 0).unwrap();
        let single = ex.features(&ds, &[0]).unwrap();
        for (m, s) in enc.stats.mean.iter().zip(&single) {
            assert!((m - s).abs() < 1e-6);
        }
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { crate::statistics::COV_RIDGE } else { 0.0 };
                assert!((enc.stats.cov[i * 8 + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = EncodingCache::default();
        c.insert("a|x".into(), vec![1.0, 2.0]);
        c.insert("b|y".into(), vec![3.0]);
        let p = dir.path().join("enc.mnw");
        c.save(&p).unwrap();
        assert_eq!(EncodingCache::load(&p).unwrap(), c);
    }
}
