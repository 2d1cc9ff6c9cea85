use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SPLIT_MNIST_TASKS;
use crate::ensemble::ExpertConfig;
use crate::error::{Error, Result};
use crate::indomain::{DmConfig, FeConfig};
use crate::merge::DistillConfig;

/// Environment variable overriding the MNIST directory.
pub const DATA_DIR_ENV: &str = "TCENS_DATA_DIR";

/// Default MNIST directory when neither config nor environment name one.
pub const DEFAULT_DATA_DIR: &str = "/root/data/mnist";

/// Resolves the data directory: explicit value, then environment, then default.
pub fn resolve_data_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Trained feature extractor + LOF memberships.
    FeDmLof,
    /// Trained feature extractor + Mahalanobis memberships.
    FeDmMahalanobis,
    /// `1/T` memberships.
    Equal,
    /// Oracle task id.
    Manual,
    /// A single expert fine-tuned task after task.
    FineTuned,
    /// A single expert retrained on all data so far.
    FullRetrain,
    /// Frozen, randomly initialized feature extractor + LOF.
    PretrainedFeDm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FeDmLof,
        Method::FeDmMahalanobis,
        Method::Equal,
        Method::Manual,
        Method::FineTuned,
        Method::FullRetrain,
        Method::PretrainedFeDm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FeDmLof => "fe_dm_lof",
            Method::FeDmMahalanobis => "fe_dm_mahalanobis",
            Method::Equal => "equal",
            Method::Manual => "manual",
            Method::FineTuned => "fine_tuned",
            Method::FullRetrain => "full_retrain",
            Method::PretrainedFeDm => "pretrained_fe_dm",
        }
    }

    /// Methods that fuse the per-task experts.
    pub fn uses_ensemble(self) -> bool {
        !matches!(self, Method::FineTuned | Method::FullRetrain)
    }

    /// Methods whose memberships come from in-domain models.
    pub fn is_dynamic(self) -> bool {
        matches!(self, Method::FeDmLof | Method::FeDmMahalanobis | Method::PretrainedFeDm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Everything that determines a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub runs: usize,
    /// Number of Split MNIST tasks to run (1..=5).
    pub tasks: usize,
    /// Per-task caps on training and test samples.
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub fe: FeConfig,
    pub dm: DmConfig,
    pub beta: f64,
    pub expert: ExpertConfig,
    pub distill: DistillConfig,
    pub histogram_bins: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            seed: 0,
            methods: vec![Method::FeDmLof],
            runs: 3,
            tasks: SPLIT_MNIST_TASKS,
            max_train: None,
            max_test: None,
            fe: FeConfig::default(),
            dm: DmConfig::default(),
            beta: 1.0,
            expert: ExpertConfig::default(),
            distill: DistillConfig::default(),
            histogram_bins: 50,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.tasks == 0 || self.tasks > SPLIT_MNIST_TASKS {
            return bad(format!("tasks must be in 1..={SPLIT_MNIST_TASKS}, got {}", self.tasks));
        }
        if self.max_train == Some(0) || self.max_test == Some(0) {
            return bad("sample caps must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.dm.k == 0 {
            return bad("lof_k must be positive".into());
        }
        if !(self.dm.eps > 0.0) {
            return bad("covariance eps must be positive".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if self.fe.embedding_dim == 0 || self.fe.hidden.contains(&0) || self.expert.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        self.fe.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.expert.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        resolve_data_dir(self.data_dir.clone())
    }

    /// Methods in a fixed order without duplicates.
    pub fn method_set(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }

    /// Config echo; replaying it reproduces the run.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
