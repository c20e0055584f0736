//! Image classification datasets: synthetic family generator, the `MNNSDS01`
//! file format and stratified splits.
//!
//! File layout (little-endian): magic `MNNSDS01`, `u16` version, `u16`
//! classes, `u32` n, `u8` channels, `u16` height, `u16` width, then
//! `n·c·h·w` image bytes (row-major, sample-major) followed by `n` `u16`
//! labels.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Stream};

pub const DATASET_MAGIC: &[u8; 8] = b"MNNSDS01";
pub const DATASET_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 2 + 4 + 1 + 2 + 2;

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;
pub const MIN_PER_CLASS_PER_SPLIT: usize = 2;
pub const DEFAULT_SPLIT_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescriptor {
    pub id: String,
    pub classes: u16,
    pub channels: u8,
    pub height: u16,
    pub width: u16,
    /// `n·c·h·w` bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl DatasetDescriptor {
    pub fn new(
        id: impl Into<String>,
        classes: u16,
        (channels, height, width): (u8, u16, u16),
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let ds = Self {
            id: id.into(),
            classes,
            channels,
            height,
            width,
            images,
            labels,
            split_seed: DEFAULT_SPLIT_SEED,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Format("zero classes or image dimension".into()));
        }
        if self.images.len() != self.len() * self.pixels() {
            return Err(Error::shape(
                "DatasetDescriptor",
                self.len() * self.pixels(),
                self.images.len(),
            ));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::Format(format!(
                "label {l} of sample {i} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels as usize, self.height as usize, self.width as usize)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Pixels scaled to roughly zero mean, unit range: `(v − 128) / 64`.
    pub fn image_f32(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&v| (v as f32 - 128.0) / 64.0).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Stratified 70/15/15 split, deterministic under `split_seed`.
    pub fn splits(&self) -> Result<Splits> {
        let mut by_class = vec![Vec::new(); self.classes as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut rng = Rng::stream(self.split_seed, Stream::Split);
        let mut s = Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (c, mut idx) in by_class.into_iter().enumerate() {
            let n = idx.len();
            if n < 3 * MIN_PER_CLASS_PER_SPLIT {
                return Err(Error::InvalidInput(format!(
                    "dataset {:?}: class {c} has {n} samples, need at least {}",
                    self.id,
                    3 * MIN_PER_CLASS_PER_SPLIT
                )));
            }
            rng.shuffle(&mut idx);
            let n_val = ((n as f64 * VAL_FRACTION).round() as usize).max(MIN_PER_CLASS_PER_SPLIT);
            let n_test = n_val;
            let n_train = n - n_val - n_test;
            s.train.extend_from_slice(&idx[..n_train]);
            s.val.extend_from_slice(&idx[n_train..n_train + n_val]);
            s.test.extend_from_slice(&idx[n_train + n_val..]);
        }
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        Ok(s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() + 2 * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.images);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn decode(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let need = |off: usize, len: usize| -> Result<()> {
            if bytes.len() < off + len {
                Err(Error::Truncated {
                    offset: bytes.len(),
                    needed: off + len - bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(0, 8)?;
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset magic {:?}, expected MNNSDS01",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        need(8, HEADER_LEN - 8)?;
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(8);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let classes = u16_at(10);
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let channels = bytes[16];
        let height = u16_at(17);
        let width = u16_at(19);
        let pixels = channels as usize * height as usize * width as usize;
        let img_len = n * pixels;
        need(HEADER_LEN, img_len)?;
        need(HEADER_LEN + img_len, 2 * n)?;
        let images = bytes[HEADER_LEN..HEADER_LEN + img_len].to_vec();
        let labels: Vec<u16> = bytes[HEADER_LEN + img_len..HEADER_LEN + img_len + 2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if bytes.len() != HEADER_LEN + img_len + 2 * n {
            return Err(Error::Format(format!(
                "{} trailing bytes after labels",
                bytes.len() - HEADER_LEN - img_len - 2 * n
            )));
        }
        Self::new(id, classes, (channels, height, width), images, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// Read a dataset file; the id is the file stem.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::decode(id, &fs::read(path)?)
    }

    /// Subset of samples as a new dataset (used for held-out queries and tests).
    pub fn select(&self, id: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut ds = Self::new(id, self.classes, (self.channels, self.height, self.width), images, labels)?;
        ds.split_seed = self.split_seed;
        Ok(ds)
    }
}

/// Generator parameters for one synthetic dataset. Every class draws a
/// Gaussian blob at a class-specific centre plus an oriented sinusoidal
/// texture; `shift` (δ) moves centres, scales texture frequency and offsets
/// brightness so that δ controls distributional distance from the δ = 0
/// member of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFamilySpec {
    pub classes: u16,
    pub height: u16,
    pub width: u16,
    /// Seeds the per-class prototypes shared by every member of the family.
    pub class_seed: u64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub jitter: f64,
    pub shift: f64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 16,
            width: 16,
            class_seed: 7,
            blob_sigma: 2.5,
            blob_amplitude: 70.0,
            texture_amplitude: 30.0,
            noise_std: 40.0,
            jitter: 2.5,
            shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPrototype {
    pub cx: f64,
    pub cy: f64,
    pub frequency: f64,
    pub orientation: f64,
    pub polarity: f64,
}

impl SyntheticFamilySpec {
    pub fn with_shift(&self, shift: f64) -> Self {
        Self { shift, ..self.clone() }
    }

    pub fn prototypes(&self) -> Vec<ClassPrototype> {
        let mut rng = Rng::stream(self.class_seed, Stream::Custom(0xC1A55));
        let (w, h) = (self.width as f64, self.height as f64);
        (0..self.classes)
            .map(|c| {
                // spread centres around a ring so classes are separable on average
                let angle = 2.0 * PI * (c as f64 + 0.25 * rng.uniform()) / self.classes as f64;
                let radius = 0.28 * w.min(h);
                ClassPrototype {
                    cx: w / 2.0 + radius * angle.cos(),
                    cy: h / 2.0 + radius * angle.sin(),
                    frequency: 1.5 + 2.5 * rng.uniform(),
                    orientation: PI * rng.uniform(),
                    polarity: if c % 2 == 0 { 1.0 } else { -1.0 },
                }
            })
            .collect()
    }

    fn render(&self, proto: &ClassPrototype, rng: &mut Rng, out: &mut Vec<u8>) {
        let d = self.shift;
        let cx = proto.cx + 1.5 * d + rng.uniform_range(-self.jitter, self.jitter);
        let cy = proto.cy - 0.75 * d + rng.uniform_range(-self.jitter, self.jitter);
        let freq = proto.frequency * (1.0 + 0.2 * d);
        let theta = proto.orientation + 0.3 * d;
        let phase = 2.0 * PI * rng.uniform();
        let brightness = 128.0 + 14.0 * d;
        let contrast = 1.0 / (1.0 + 0.15 * d);
        let (w, h) = (self.width as usize, self.height as usize);
        let two_s2 = 2.0 * self.blob_sigma * self.blob_sigma;
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let r2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                let blob = self.blob_amplitude * proto.polarity * (-r2 / two_s2).exp();
                let u = (xf * theta.cos() + yf * theta.sin()) / w as f64;
                let tex = self.texture_amplitude * (2.0 * PI * freq * u + phase).sin();
                let v = brightness + contrast * (blob + tex) + self.noise_std * rng.normal();
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Generate `n` balanced samples; requires `n >= classes · 20`.
pub fn gen_synthetic(id: impl Into<String>, spec: &SyntheticFamilySpec, n: usize, seed: u64) -> Result<DatasetDescriptor> {
    let k = spec.classes as usize;
    if k == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidConfig("synthetic spec needs classes and image size".into()));
    }
    if n < k * 20 {
        return Err(Error::InvalidInput(format!(
            "gen_synthetic: n = {n} is below classes x 20 = {}",
            k * 20
        )));
    }
    let protos = spec.prototypes();
    let mut rng = Rng::stream(seed, Stream::Data);
    let mut labels: Vec<u16> = (0..n).map(|i| (i % k) as u16).collect();
    rng.shuffle(&mut labels);
    let mut images = Vec::with_capacity(n * spec.width as usize * spec.height as usize);
    for &l in &labels {
        spec.render(&protos[l as usize], &mut rng, &mut images);
    }
    DatasetDescriptor::new(id, spec.classes, (1, spec.height, spec.width), images, labels)
}

/// A family of synthetic datasets sharing class prototypes, one per shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub prefix: String,
    pub samples_per_dataset: usize,
    pub shifts: Vec<f64>,
    pub base: SyntheticFamilySpec,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            prefix: "syn".into(),
            samples_per_dataset: 480,
            shifts: vec![0.0, 0.75, 1.5, 2.25, 3.0],
            base: SyntheticFamilySpec::default(),
        }
    }
}

impl FamilyConfig {
    pub fn dataset_id(&self, i: usize) -> String {
        format!("{}{}", self.prefix, i)
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<DatasetDescriptor>> {
        if self.shifts.is_empty() {
            return Err(Error::InvalidConfig("family needs at least one shift".into()));
        }
        self.shifts
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                gen_synthetic(
                    self.dataset_id(i),
                    &self.base.with_shift(s),
                    self.samples_per_dataset,
                    crate::numerics::derive_seed(seed, i as u64),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetDescriptor {
        gen_synthetic("t", &SyntheticFamilySpec::default(), 120, 3).unwrap()
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(small().encode(), small().encode());
        let other = gen_synthetic("t", &SyntheticFamilySpec::default(), 120, 4).unwrap();
        assert_ne!(small().images, other.images);
    }

    #[test]
    fn balanced_labels() {
        let ds = gen_synthetic("t", &SyntheticFamilySpec::default(), 123, 1).unwrap();
        let h = ds.class_histogram();
        let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
        assert!(hi - lo <= 1, "{h:?}");
    }

    #[test]
    fn too_few_samples() {
        assert!(gen_synthetic("t", &SyntheticFamilySpec::default(), 79, 1).is_err());
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ds = small();
        let bytes = ds.encode();
        let back = DatasetDescriptor::decode("t", &bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = small().encode();
        match DatasetDescriptor::decode("t", &bytes[..bytes.len() - 3]) {
            Err(Error::Truncated { offset, needed }) => {
                assert_eq!(offset, bytes.len() - 3);
                assert_eq!(needed, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            DatasetDescriptor::decode("t", &bytes[..10]),
            Err(Error::Truncated { offset: 10, .. })
        ));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = small().encode();
        bytes[3] ^= 0xFF;
        assert!(matches!(DatasetDescriptor::decode("t", &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn label_out_of_range() {
        let mut bytes = small().encode();
        let last = bytes.len() - 2;
        bytes[last..].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(DatasetDescriptor::decode("t", &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn splits_disjoint_exhaustive_stratified() {
        let ds = small();
        let s = ds.splits().unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for part in [&s.val, &s.test, &s.train] {
            let mut h = vec![0; 4];
            for &i in part.iter() {
                h[ds.labels[i] as usize] += 1;
            }
            assert!(h.iter().all(|&c| c >= MIN_PER_CLASS_PER_SPLIT), "{h:?}");
        }
        assert_eq!(s, ds.splits().unwrap());
    }
}
