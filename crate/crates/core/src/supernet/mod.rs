//! Weight-sharing supernetwork: search space, masks, the network itself,
//! strict-fairness sampling and two-stage training.

mod checkpoint;
mod fairness;
mod net;
mod space;
mod subnet;
mod train;

pub use checkpoint::{SupernetCheckpoint, SupernetMeta, SUPERNET_SCHEMA};
pub use fairness::FairnessSampler;
pub use net::{argmax, extract_prefix, scatter_prefix, softmax, BatchGrad, NetShape, Network, ParamLayout, StageShape};
pub use space::{active_channels, ArchitectureConfig, Mask, SearchSpace, StageChoice};
pub(crate) use space::short_hash;
pub use subnet::{apply_mask, embed_subnet, extract_subnet, scatter_grads, subnet_forward};
pub use train::{
    accuracy, estimate_performance, fit, train_scratch, train_supernet, EpochLog, ImageSet, SplitSets, TrainSchedule,
    TrainedSupernet,
};
