//! Data-free merging of two task experts into one student, and averaging of
//! their in-domain models into a single ensemble slot.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::ensemble::{ExpertConfig, ExpertModel};
use crate::error::{Error, Result};
use crate::indomain::{InDomainModel, OutlierScorer};
use crate::nn::{self, DenseNet, Optimizer, OptimizerConfig};
use crate::rng::Rng;

/// Per-dimension mean and standard deviation of a task's training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStats {
    /// Population statistics over the rows of `samples`.
    pub fn from_samples(samples: &Samples) -> Result<Self> {
        Self::from_inputs(samples.inputs())
    }

    pub fn from_inputs(x: ArrayView2<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("input statistics over zero samples".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `n` inputs from independent per-dimension Gaussians, clipped to [0, 1].
    pub fn synthesize(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim();
        let mut x = Array2::zeros((n, d));
        for mut row in x.outer_iter_mut() {
            for j in 0..d {
                row[j] = rng.normal(self.mean[j], self.std[j]).clamp(0.0, 1.0);
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub samples_per_teacher: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            samples_per_teacher: 10_000,
            temperature: 1.0,
            epochs: 4,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Teacher softmax at `temperature`, one row per input.
fn soft_targets(teacher: &ExpertModel, x: ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    let mut logits = teacher.net.predict(x)?;
    logits.mapv_inplace(|z| z / temperature);
    Ok(nn::softmax_rows(logits.view()))
}

/// Trains a student with the teachers' architecture on synthetic inputs
/// drawn from each teacher's stored input statistics, against the teachers'
/// soft outputs. Teachers are only read.
pub fn distill_merge(
    teacher_a: &ExpertModel,
    teacher_b: &ExpertModel,
    stats_a: Option<&InputStats>,
    stats_b: Option<&InputStats>,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<ExpertModel> {
    cfg.validate()?;
    let stats_a = stats_a.ok_or_else(|| Error::InvalidArgument(format!("missing input statistics for task {}", teacher_a.task_id)))?;
    let stats_b = stats_b.ok_or_else(|| Error::InvalidArgument(format!("missing input statistics for task {}", teacher_b.task_id)))?;
    if teacher_a.class_count != teacher_b.class_count {
        return Err(Error::dim("teacher class count", teacher_a.class_count, teacher_b.class_count));
    }
    for (stats, teacher) in [(stats_a, teacher_a), (stats_b, teacher_b)] {
        if stats.dim() != teacher.net.input_dim() {
            return Err(Error::dim("input statistics", teacher.net.input_dim(), stats.dim()));
        }
    }

    let xa = stats_a.synthesize(cfg.samples_per_teacher, rng);
    let xb = stats_b.synthesize(cfg.samples_per_teacher, rng);
    let ta = soft_targets(teacher_a, xa.view(), cfg.temperature)?;
    let tb = soft_targets(teacher_b, xb.view(), cfg.temperature)?;
    let x = ndarray::concatenate(Axis(0), &[xa.view(), xb.view()]).expect("matching widths");
    let targets = ndarray::concatenate(Axis(0), &[ta.view(), tb.view()]).expect("matching widths");

    let shape: Vec<usize> = std::iter::once(teacher_a.net.input_dim())
        .chain(teacher_a.net.layers().iter().map(|l| l.out_dim()))
        .collect();
    let hidden = teacher_a.net.layers()[0].activation;
    let output = teacher_a.net.layers().last().expect("non-empty net").activation;
    let mut student = DenseNet::new(&shape, hidden, output, rng)?;

    let mut opt = Optimizer::new(cfg.optimizer)?;
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(x.nrows());
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let tb = targets.select(Axis(0), chunk);
            let (logits, cache) = student.forward(xb.view())?;
            let (_, grad) = nn::soft_cross_entropy(logits.view(), tb.view(), cfg.temperature);
            let back = student.backward(&cache, grad.view())?;
            opt.step(&mut student.param_slices_mut(), &back.params.slices())?;
        }
        if !student.all_finite() {
            return Err(Error::NonFinite(format!("student parameters after epoch {epoch}")));
        }
    }

    let merged_stats = InputStats {
        mean: stats_a.mean.iter().zip(&stats_b.mean).map(|(a, b)| 0.5 * (a + b)).collect(),
        std: stats_a.std.iter().zip(&stats_b.std).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    Ok(ExpertModel::new(
        student,
        teacher_a.task_id.min(teacher_b.task_id),
        Some(merged_stats),
    ))
}

/// Convenience wrapper reading the stats stored on each teacher.
pub fn distill_experts(teacher_a: &ExpertModel, teacher_b: &ExpertModel, cfg: &DistillConfig, rng: &mut Rng) -> Result<ExpertModel> {
    distill_merge(
        teacher_a,
        teacher_b,
        teacher_a.input_stats.as_ref(),
        teacher_b.input_stats.as_ref(),
        cfg,
        rng,
    )
}

/// Two in-domain models scored as one: `0.5·a(x) + 0.5·b(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedInDomain {
    pub a: InDomainModel,
    pub b: InDomainModel,
}

pub fn merge_in_domain(a: InDomainModel, b: InDomainModel) -> MergedInDomain {
    MergedInDomain { a, b }
}

impl MergedInDomain {
    pub fn outlier_score(&self, x: &[f64]) -> Result<f64> {
        Ok(average(self.a.outlier_score(x)?, self.b.outlier_score(x)?))
    }
}

fn average(a: f64, b: f64) -> f64 {
    0.5 * a + 0.5 * b
}

impl OutlierScorer for MergedInDomain {
    fn outlier_scores(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let a = self.a.outlier_scores(inputs)?;
        let b = self.b.outlier_scores(inputs)?;
        Ok(a.into_iter().zip(b).map(|(a, b)| average(a, b)).collect())
    }
}

/// Fraction (percent) of rows where both experts pick the same class.
pub fn agreement(a: &ExpertModel, b: &ExpertModel, x: ArrayView2<'_, f64>) -> Result<f64> {
    let pa = a.predict_batch(x)?;
    let pb = b.predict_batch(x)?;
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let same = pa
        .outer_iter()
        .zip(pb.outer_iter())
        .filter(|(u, v)| crate::ensemble::argmax(u.as_slice().unwrap()) == crate::ensemble::argmax(v.as_slice().unwrap()))
        .count();
    Ok(100.0 * same as f64 / x.nrows() as f64)
}

/// Distillation settings mirroring an expert's training schedule.
pub fn student_config(expert: &ExpertConfig) -> DistillConfig {
    DistillConfig {
        epochs: expert.epochs,
        batch_size: expert.batch_size,
        optimizer: expert.optimizer,
        ..DistillConfig::default()
    }
}
