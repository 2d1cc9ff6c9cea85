use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::merge::InputStats;
use crate::nn::{self, Activation, DenseNet, Optimizer, OptimizerConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hidden: vec![400, 400],
            classes: 2,
            epochs: 4,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("an expert needs at least two classes".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Classifier trained on one task (or, for baselines, on several).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub net: DenseNet,
    pub class_count: usize,
    pub task_id: usize,
    /// Input statistics of the training data, kept for data-free merging.
    pub input_stats: Option<InputStats>,
}

impl ExpertModel {
    pub fn new(net: DenseNet, task_id: usize, input_stats: Option<InputStats>) -> Self {
        let class_count = net.output_dim();
        Self {
            net,
            class_count,
            task_id,
            input_stats,
        }
    }

    /// Fresh, untrained expert.
    pub fn init(input_dim: usize, task_id: usize, cfg: &ExpertConfig, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.classes);
        let net = DenseNet::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self::new(net, task_id, None))
    }

    /// Class probabilities for one input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(nn::softmax_row(&self.net.predict_one(x)?))
    }

    /// Class probabilities, one row per input.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.class_count));
        for (i, chunk) in x.axis_chunks_iter(ndarray::Axis(0), 2048).enumerate() {
            let p = nn::softmax_rows(self.net.predict(chunk)?.view());
            out.slice_mut(ndarray::s![i * 2048..i * 2048 + chunk.nrows(), ..]).assign(&p);
        }
        Ok(out)
    }

    /// Percent of samples whose argmax class matches the label.
    pub fn accuracy(&self, samples: &Samples) -> Result<f64> {
        let probs = self.predict_batch(samples.inputs())?;
        Ok(accuracy_from_probs(probs.view(), samples.labels()))
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_probs(probs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probs
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("row-major")) == y)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

fn check_trainable(sets: &[&Samples], classes: usize) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for s in sets {
        for &l in s.labels() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} exceeds the expert's {classes} classes")));
            }
            seen.insert(l);
        }
    }
    if seen.len() < 2 {
        return Err(Error::ClassTooSmall {
            class: seen.iter().next().copied().unwrap_or(0),
            count: seen.len(),
            required: 2,
        });
    }
    Ok(())
}

/// Minibatch cross-entropy training over the union of `sets`.
///
/// Rows are visited in a canonical order (by source index) before the
/// seeded shuffle, so the order in which sets are listed does not matter.
fn fit(net: &mut DenseNet, sets: &[&Samples], cfg: &ExpertConfig, rng: &mut Rng) -> Result<()> {
    let mut rows: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.len()).map(move |r| (s, r)))
        .collect();
    rows.sort_by(|&(sa, ra), &(sb, rb)| {
        let (a, b) = (sets[sa], sets[sb]);
        (a.source_indices()[ra], a.digits()[ra], a.labels()[ra])
            .cmp(&(b.source_indices()[rb], b.digits()[rb], b.labels()[rb]))
            .then_with(|| {
                let (ia, ib) = (a.inputs(), b.inputs());
                ia.row(ra)
                    .iter()
                    .zip(ib.row(rb).iter())
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let dim = net.input_dim();
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(rows.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), dim));
            let mut y = Vec::with_capacity(chunk.len());
            for (i, &o) in chunk.iter().enumerate() {
                let (s, r) = rows[o];
                x.row_mut(i).assign(&sets[s].inputs().row(r));
                y.push(sets[s].labels()[r]);
            }
            let (logits, cache) = net.forward(x.view())?;
            let (_, grad) = nn::cross_entropy(logits.view(), &y);
            let back = net.backward(&cache, grad.view())?;
            opt.step(&mut net.param_slices_mut(), &back.params.slices())?;
        }
        if !net.all_finite() {
            return Err(Error::NonFinite(format!("expert parameters after epoch {epoch}")));
        }
    }
    Ok(())
}

/// Trains a fresh expert on one task.
pub fn train_expert(task_id: usize, train: &Samples, cfg: &ExpertConfig, rng: &mut Rng) -> Result<ExpertModel> {
    cfg.validate()?;
    check_trainable(&[train], cfg.classes)?;
    let mut expert = ExpertModel::init(train.dim(), task_id, cfg, rng)?;
    fit(&mut expert.net, &[train], cfg, rng)?;
    expert.input_stats = Some(InputStats::from_samples(train)?);
    Ok(expert)
}

/// Continues training `expert` on a new task's data only. The input is left
/// untouched; a new optimizer state is used.
pub fn fine_tune(expert: &ExpertModel, task_id: usize, train: &Samples, cfg: &ExpertConfig, rng: &mut Rng) -> Result<ExpertModel> {
    cfg.validate()?;
    check_trainable(&[train], expert.class_count)?;
    let mut tuned = expert.clone();
    fit(&mut tuned.net, &[train], cfg, rng)?;
    tuned.task_id = task_id;
    tuned.input_stats = Some(InputStats::from_samples(train)?);
    Ok(tuned)
}

/// Fresh expert trained on the union of every task seen so far.
pub fn full_retrain(sets: &[&Samples], cfg: &ExpertConfig, rng: &mut Rng) -> Result<ExpertModel> {
    cfg.validate()?;
    let first = sets.first().ok_or_else(|| Error::Empty("full retrain over zero tasks".into()))?;
    check_trainable(sets, cfg.classes)?;
    let mut expert = ExpertModel::init(first.dim(), sets.len() - 1, cfg, rng)?;
    fit(&mut expert.net, sets, cfg, rng)?;
    Ok(expert)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two linearly separable blobs in 2-D.
    pub(crate) fn blobs(n: usize, seed: u64) -> Samples {
        let mut rng = Rng::new(seed);
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let cx = if class == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = rng.normal(cx, 0.5);
            x[[i, 1]] = rng.normal(0.0, 0.5);
            y.push(class);
        }
        Samples::from_labeled(x, y).unwrap()
    }

    fn small_cfg(epochs: usize) -> ExpertConfig {
        ExpertConfig {
            hidden: vec![16],
            epochs,
            batch_size: 16,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn learns_separable_task() {
        let data = blobs(400, 1);
        // 200 steps: 8 epochs of 25 batches.
        let e = train_expert(0, &data, &small_cfg(8), &mut Rng::new(2)).unwrap();
        assert!(e.accuracy(&data).unwrap() >= 99.0);
    }

    #[test]
    fn untrained_is_near_chance() {
        let data = blobs(400, 1);
        let mut accs = Vec::new();
        for seed in 0..20 {
            let e = train_expert(0, &data, &small_cfg(0), &mut Rng::new(seed)).unwrap();
            accs.push(e.accuracy(&data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 50.0).abs() <= 10.0, "{mean}");
    }

    #[test]
    fn probabilities_are_normalized() {
        let data = blobs(50, 3);
        let e = train_expert(0, &data, &small_cfg(1), &mut Rng::new(4)).unwrap();
        let p = e.predict_batch(data.inputs()).unwrap();
        for (row, logits) in p.outer_iter().zip(e.net.predict(data.inputs()).unwrap().outer_iter()) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(argmax(row.as_slice().unwrap()), argmax(logits.to_vec().as_slice()));
        }
    }

    #[test]
    fn zero_logits_uniform() {
        let mut e = ExpertModel::init(3, 0, &small_cfg(0), &mut Rng::new(1)).unwrap();
        let zeros = vec![0.0; e.net.param_count()];
        e.net.set_params_flat(&zeros).unwrap();
        assert_eq!(e.predict(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_class_rejected() {
        let data = Samples::from_labeled(Array2::zeros((4, 2)), vec![1, 1, 1, 1]).unwrap();
        assert!(train_expert(0, &data, &small_cfg(1), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let data = blobs(100, 5);
        let a = train_expert(0, &data, &small_cfg(2), &mut Rng::new(9)).unwrap();
        let b = train_expert(0, &data, &small_cfg(2), &mut Rng::new(9)).unwrap();
        assert_eq!(a.net.params_flat(), b.net.params_flat());
    }

    #[test]
    fn fine_tune_zero_epochs_is_identity() {
        let data = blobs(100, 5);
        let e = train_expert(0, &data, &small_cfg(2), &mut Rng::new(9)).unwrap();
        let t = fine_tune(&e, 1, &data, &small_cfg(0), &mut Rng::new(3)).unwrap();
        assert_eq!(e.net.params_flat(), t.net.params_flat());
    }

    #[test]
    fn fine_tune_same_task_keeps_accuracy() {
        let data = blobs(400, 6);
        let e = train_expert(0, &data, &small_cfg(8), &mut Rng::new(1)).unwrap();
        let before = e.accuracy(&data).unwrap();
        let t = fine_tune(&e, 0, &data, &small_cfg(2), &mut Rng::new(2)).unwrap();
        assert!(t.accuracy(&data).unwrap() >= before - 1.0);
    }

    #[test]
    fn full_retrain_single_task_equals_train_expert() {
        let data = blobs(100, 7);
        let a = train_expert(0, &data, &small_cfg(2), &mut Rng::new(4)).unwrap();
        let b = full_retrain(&[&data], &small_cfg(2), &mut Rng::new(4)).unwrap();
        assert_eq!(a.net.params_flat(), b.net.params_flat());
    }

    #[test]
    fn full_retrain_ignores_set_order() {
        // Both sets carry source indices 0..60, so the tie-break on inputs
        // decides the canonical order.
        let a = blobs(60, 1);
        let b = blobs(60, 2);
        let x = full_retrain(&[&a, &b], &small_cfg(2), &mut Rng::new(5)).unwrap();
        let y = full_retrain(&[&b, &a], &small_cfg(2), &mut Rng::new(5)).unwrap();
        assert_eq!(x.net.params_flat(), y.net.params_flat());
    }
}
