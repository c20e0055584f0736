use serde::{Deserialize, Serialize};

use super::fairness::FairnessSampler;
use super::net::Network;
use super::space::{ArchitectureConfig, SearchSpace};
use super::subnet::{extract_subnet, scatter_grads};
use crate::dataio::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Rng, Stream, Tensor};

/// Images converted to network input plus labels.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn from_indices(ds: &DatasetDescriptor, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| ds.image_f32(i)).collect(),
            labels: indices.iter().map(|&i| ds.labels[i] as usize).collect(),
        }
    }

    pub fn all(ds: &DatasetDescriptor) -> Self {
        Self::from_indices(ds, &(0..ds.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Vec<(&[f32], usize)> {
        idx.iter().map(|&i| (self.images[i].as_slice(), self.labels[i])).collect()
    }
}

/// Train and validation splits of one dataset.
#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: ImageSet,
    pub val: ImageSet,
}

impl SplitSets {
    pub fn new(ds: &DatasetDescriptor) -> Result<Self> {
        let s = ds.splits()?;
        Ok(Self {
            train: ImageSet::from_indices(ds, &s.train),
            val: ImageSet::from_indices(ds, &s.val),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub subnets_per_batch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::with_total_epochs(10)
    }
}

impl TrainSchedule {
    /// 40% of epochs on the maximal network, the rest on sampled subnets.
    pub fn with_total_epochs(total: usize) -> Self {
        let stage1 = ((total as f64 * 0.4).round() as usize).max(1);
        Self {
            stage1_epochs: stage1,
            stage2_epochs: total.saturating_sub(stage1),
            subnets_per_batch: 4,
            batch_size: 32,
            adam: AdamConfig::with_lr(3e-3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.subnets_per_batch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "schedule: stage1_epochs, subnets_per_batch and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Validation accuracy of the maximal network after the epoch.
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedSupernet {
    pub theta: Vec<Tensor>,
    pub log: Vec<EpochLog>,
    pub optimizer_steps: u64,
}

fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(size).map(|c| c.to_vec()).collect()
}

pub fn accuracy(net: &Network, set: &ImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("accuracy on empty split".into()));
    }
    let mut hits = 0;
    for (x, &y) in set.images.iter().zip(&set.labels) {
        if net.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

fn nonfinite(what: &str, epoch: usize, loss: f64) -> Error {
    Error::NonFinite(format!("{what}: loss {loss} at epoch {epoch}"))
}

/// Two-stage weight-sharing training. Stage 1 trains the maximal network;
/// stage 2 averages the loss of `subnets_per_batch` fairly sampled subnets
/// per batch. Masked entries of `Θ` receive zero gradient.
pub fn train_supernet(
    space: &SearchSpace,
    data: &SplitSets,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainedSupernet> {
    space.validate()?;
    schedule.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let shape = space.supernet_shape();
    let mut theta = Network::<f32>::init(shape.clone(), &mut Rng::stream(seed, Stream::Weights)).params;
    let mut adam = AdamState::new(schedule.adam, &theta);
    let mut shuffle = Rng::stream(seed, Stream::Shuffle);
    let mut sampler = FairnessSampler::new(space.clone(), Rng::stream(seed, Stream::Sampling));
    let maximal = space.maximal_config();
    let mut log = Vec::new();

    for epoch in 0..schedule.total_epochs() {
        let stage = if epoch < schedule.stage1_epochs { 1 } else { 2 };
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for idx in batches(data.train.len(), schedule.batch_size, &mut shuffle) {
            let batch = data.train.batch(&idx);
            let cfgs: Vec<ArchitectureConfig> = if stage == 1 {
                vec![maximal.clone()]
            } else {
                sampler.sample_fair(schedule.subnets_per_batch)
            };
            let mut grads: Vec<Tensor> = theta.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let scale = 1.0 / cfgs.len() as f32;
            for cfg in &cfgs {
                let sub = extract_subnet(space, &theta, cfg)?;
                let g = sub.loss_and_grad(&batch)?;
                if !g.loss.is_finite() {
                    return Err(nonfinite("supernet training", epoch, g.loss));
                }
                loss_sum += g.loss * batch.len() as f64 / cfgs.len() as f64;
                hits += g.correct;
                seen += batch.len();
                let scaled: Vec<Tensor> = g.grads.iter().map(|t| t.scale(scale)).collect();
                scatter_grads(space, cfg, &scaled, &mut grads)?;
            }
            adam.step(&mut theta, &grads)?;
        }
        let net = Network::new(shape.clone(), theta.clone())?;
        let val_acc = if data.val.is_empty() { 0.0 } else { accuracy(&net, &data.val)? };
        let entry = EpochLog {
            epoch,
            stage,
            train_loss: loss_sum / data.train.len() as f64,
            train_acc: hits as f64 / seen as f64,
            val_acc,
        };
        log::debug!("supernet epoch {epoch} stage {stage}: loss {:.4} val {:.3}", entry.train_loss, val_acc);
        log.push(entry);
    }
    Ok(TrainedSupernet {
        theta,
        log,
        optimizer_steps: adam.step_count(),
    })
}

/// Inherited-weight accuracy `P̂` of `cfg` on a validation split.
pub fn estimate_performance(space: &SearchSpace, theta: &[Tensor], cfg: &ArchitectureConfig, val: &ImageSet) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidInput("empty validation split".into()));
    }
    accuracy(&extract_subnet(space, theta, cfg)?, val)
}

/// Plain minibatch training of a standalone network. Returns the optimizer
/// step count.
pub fn fit(net: &mut Network, train: &ImageSet, epochs: usize, batch_size: usize, adam: &AdamConfig, seed: u64) -> Result<u64> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let mut state = AdamState::new(*adam, &net.params);
    let mut shuffle = Rng::stream(seed, Stream::Shuffle);
    for epoch in 0..epochs {
        for idx in batches(train.len(), batch_size.max(1), &mut shuffle) {
            let g = net.loss_and_grad(&train.batch(&idx))?;
            if !g.loss.is_finite() {
                return Err(nonfinite("training", epoch, g.loss));
            }
            state.step(&mut net.params, &g.grads)?;
        }
    }
    Ok(state.step_count())
}

/// Train `cfg` from a fresh initialisation and report validation accuracy `P`.
pub fn train_scratch(space: &SearchSpace, cfg: &ArchitectureConfig, data: &SplitSets, schedule: &TrainSchedule, seed: u64) -> Result<f64> {
    let shape = space.subnet_shape(cfg)?;
    let mut net = Network::<f32>::init(shape, &mut Rng::stream(seed, Stream::Weights));
    fit(&mut net, &data.train, schedule.total_epochs(), schedule.batch_size, &schedule.adam, seed)?;
    accuracy(&net, &data.val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn separable_set(n: usize, seed: u64) -> ImageSet {
        let mut rng = Rng::new(seed);
        let mut set = ImageSet::default();
        for i in 0..n {
            let y = i % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            set.images.push((0..256).map(|p| (sign * if p < 128 { 1.0 } else { -1.0 } + 0.3 * rng.normal()) as f32).collect());
            set.labels.push(y);
        }
        set
    }

    fn two_class_space() -> SearchSpace {
        SearchSpace {
            num_classes: 2,
            ..SearchSpace::default()
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let data = SplitSets {
            train: separable_set(96, 1),
            val: separable_set(40, 2),
        };
        let sched = TrainSchedule {
            stage1_epochs: 10,
            stage2_epochs: 0,
            ..TrainSchedule::default()
        };
        let out = train_supernet(&two_class_space(), &data, &sched, 5).unwrap();
        assert_eq!(out.log.len(), 10);
        assert!(out.log.last().unwrap().val_acc >= 0.95, "{:?}", out.log.last());
        assert_eq!(out.optimizer_steps, 10 * 3);
    }

    #[test]
    fn stage1_only_equals_plain_training() {
        let space = two_class_space();
        let data = SplitSets {
            train: separable_set(40, 3),
            val: separable_set(10, 4),
        };
        let sched = TrainSchedule {
            stage1_epochs: 2,
            stage2_epochs: 0,
            ..TrainSchedule::default()
        };
        let out = train_supernet(&space, &data, &sched, 9).unwrap();
        let mut net = Network::<f32>::init(space.supernet_shape(), &mut Rng::stream(9, Stream::Weights));
        fit(&mut net, &data.train, 2, sched.batch_size, &sched.adam, 9).unwrap();
        assert_eq!(net.params, out.theta);
    }

    #[test]
    fn constant_predictor_scores_half() {
        let space = two_class_space();
        let mut theta = Network::<f32>::init(space.supernet_shape(), &mut Rng::new(0)).params;
        for t in &mut theta {
            t.fill(0.0);
        }
        let val = separable_set(20, 7);
        let p = estimate_performance(&space, &theta, &space.maximal_config(), &val).unwrap();
        assert_eq!(p, 0.5);
        assert!(estimate_performance(&space, &theta, &space.maximal_config(), &ImageSet::default()).is_err());
    }

    #[test]
    fn non_finite_input_aborts() {
        let mut data = SplitSets {
            train: separable_set(8, 1),
            val: separable_set(4, 2),
        };
        data.train.images[0][0] = f32::NAN;
        let err = train_supernet(&two_class_space(), &data, &TrainSchedule::default(), 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
