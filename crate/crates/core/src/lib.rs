//! Task-conditioned ensembles for domain-incremental learning.
//!
//! Each task gets its own expert classifier and an in-domain model (a
//! feature extractor plus a distance measure). At inference the in-domain
//! models' outlier scores become membership weights over the experts.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod indomain;
pub mod losses;
pub mod merge;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use data::{build_split_mnist, load_mnist, PairBatch, PairSampler, Samples, TaskDataset};
pub use ensemble::{fuse, EnsembleState, ExpertConfig, ExpertModel, FusionMode, Prediction, TaskScorer};
pub use error::{Error, Result};
pub use harness::{Method, ProtocolConfig, RunReport};
pub use indomain::{membership, DistanceKind, DistanceMeasure, DmConfig, FeConfig, InDomainModel, MembershipVector, OutlierScorer};
pub use losses::{Center, LossConfig};
pub use merge::{distill_merge, merge_in_domain, DistillConfig, InputStats, MergedInDomain};
pub use metrics::{average_accuracy, backward_transfer, tdr_at_fdr, AccuracyMatrix};
pub use nn::{Activation, DenseNet, OptimizerConfig, OptimizerKind};
pub use rng::Rng;
