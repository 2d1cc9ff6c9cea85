use serde::{Deserialize, Serialize};

use crate::data::{PairSampler, Samples};
use crate::error::{Error, Result};
use crate::losses::{self, Center, LossConfig};
use crate::nn::{Activation, DenseNet, Optimizer, OptimizerConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(flatten)]
    pub loss: LossConfig,
}

impl Default for FeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 256],
            embedding_dim: 128,
            loss: LossConfig::default(),
        }
    }
}

impl FeConfig {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub center: f64,
    pub msic: f64,
}

#[derive(Debug, Clone)]
pub struct FeTraining {
    pub fe: DenseNet,
    pub center: Center,
    pub history: Vec<EpochStats>,
}

/// Trains a feature extractor on one task's training set with SGD on the
/// center + contrastive objective. The center starts at the mean embedding
/// of the freshly initialized network and is recomputed after each epoch.
pub fn train_feature_extractor(train: &Samples, cfg: &FeConfig, rng: &mut Rng) -> Result<FeTraining> {
    cfg.loss.validate()?;
    if cfg.embedding_dim == 0 {
        return Err(Error::InvalidArgument("embedding_dim must be positive".into()));
    }
    let sampler = PairSampler::new(train)?;
    let classes = train.class_index().len();
    if classes < 2 {
        return Err(Error::ClassTooSmall {
            class: classes,
            count: classes,
            required: 2,
        });
    }

    let mut fe = DenseNet::new(&cfg.dims(train.dim()), Activation::Relu, Activation::Identity, rng)?;
    let mut center = losses::update_center_epoch(&fe, train.inputs())?;
    let mut opt = Optimizer::new(OptimizerConfig::sgd(cfg.loss.lr))?;
    let batches = cfg
        .loss
        .batches_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(2 * cfg.loss.batch_pairs));

    let mut history = Vec::with_capacity(cfg.loss.epochs);
    for epoch in 0..cfg.loss.epochs {
        let (mut total, mut center_sum, mut msic) = (0.0, 0.0, 0.0);
        for _ in 0..batches {
            let batch = sampler.sample(cfg.loss.batch_pairs, rng);
            let mut obj = losses::total_loss(&fe, batch.inputs.view(), &center, cfg.loss.tau)?;
            if let Some(max_norm) = cfg.loss.clip_norm {
                let norm = obj.grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max_norm {
                    obj.grads.scale(max_norm / norm);
                }
            }
            opt.step(&mut fe.param_slices_mut(), &obj.grads.slices())?;
            total += obj.total;
            center_sum += obj.center;
            msic += obj.msic;
        }
        if !fe.all_finite() {
            return Err(Error::NonFinite(format!("feature extractor parameters after epoch {epoch}")));
        }
        center = losses::update_center_epoch(&fe, train.inputs())?;
        let b = batches as f64;
        history.push(EpochStats {
            epoch,
            total: total / b,
            center: center_sum / b,
            msic: msic / b,
        });
    }
    Ok(FeTraining { fe, center, history })
}
