pub mod affinity;
pub mod config;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod metaspace;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod statistics;
pub mod supernet;
pub mod zoo;

pub use error::{Error, Result};
pub use config::Config;
pub use dataio::{DatasetDescriptor, FamilyConfig, SyntheticFamilySpec};
pub use metaspace::{LossSet, MetaConfig, MetaSpace};
pub use retrieval::{FinetuneConfig, ModelIndex};
pub use supernet::{ArchitectureConfig, SearchSpace, SupernetCheckpoint, TrainSchedule};
pub use zoo::{AuditConfig, ZooEntry, ZooManifest, ZooPolicy};
