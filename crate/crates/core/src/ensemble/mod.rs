//! Expert classifiers and their membership-weighted fusion.

mod expert;

pub use expert::{accuracy_from_probs, argmax, fine_tune, full_retrain, train_expert, ExpertConfig, ExpertModel};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indomain::{membership, InDomainModel, MembershipVector, OutlierScorer};
use crate::merge::MergedInDomain;

/// How expert outputs are weighted at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Memberships from the in-domain models' outlier scores.
    Dynamic,
    /// `1/T` for every expert.
    Equal,
    /// All weight on a caller-supplied task id.
    Manual,
}

/// `s = Σ_t m_t · s_t`.
pub fn fuse(expert_probs: &[&[f64]], m: &MembershipVector) -> Result<Vec<f64>> {
    if expert_probs.len() != m.len() {
        return Err(Error::dim("membership entries", expert_probs.len(), m.len()));
    }
    let first = expert_probs
        .first()
        .ok_or_else(|| Error::Empty("fusion over zero experts".into()))?;
    let classes = first.len();
    let mut out = vec![0.0; classes];
    for (t, (probs, &w)) in expert_probs.iter().zip(m.as_slice()).enumerate() {
        if probs.len() != classes {
            return Err(Error::dim(format!("expert {t} class count"), classes, probs.len()));
        }
        for (o, p) in out.iter_mut().zip(probs.iter()) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// The in-domain unit occupying one ensemble slot.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskScorer {
    Single(InDomainModel),
    Merged(MergedInDomain),
}

impl OutlierScorer for TaskScorer {
    fn outlier_scores(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            TaskScorer::Single(m) => m.outlier_scores(inputs),
            TaskScorer::Merged(m) => m.outlier_scores(inputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSlot {
    pub expert: ExpertModel,
    /// Required for dynamic fusion only.
    pub in_domain: Option<TaskScorer>,
}

/// Fused output for one probe, with the diagnostics behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fused: Vec<f64>,
    pub membership: MembershipVector,
    pub expert_probs: Vec<Vec<f64>>,
    /// Per-slot outlier scores (dynamic mode only).
    pub outlier_scores: Option<Vec<f64>>,
}

/// Ordered expert/in-domain slots for the tasks seen so far. Immutable at
/// inference; prediction is a pure function of the state and the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    slots: Vec<TaskSlot>,
    pub mode: FusionMode,
    pub beta: f64,
}

impl EnsembleState {
    pub fn new(mode: FusionMode, beta: f64) -> Self {
        Self {
            slots: Vec::new(),
            mode,
            beta,
        }
    }

    pub fn push(&mut self, expert: ExpertModel, in_domain: Option<TaskScorer>) {
        self.slots.push(TaskSlot { expert, in_domain });
    }

    pub fn slots(&self) -> &[TaskSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Per-slot outlier scores for each probe row, `[n x T]`.
    pub fn outlier_scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.len()));
        for (t, slot) in self.slots.iter().enumerate() {
            let scorer = slot.in_domain.as_ref().ok_or(Error::MissingInDomain(t))?;
            let scores = scorer.outlier_scores(x)?;
            for (i, s) in scores.into_iter().enumerate() {
                out[[i, t]] = s;
            }
        }
        Ok(out)
    }

    fn memberships(&self, x: ArrayView2<'_, f64>, task_ids: Option<&[usize]>) -> Result<(Vec<MembershipVector>, Option<Array2<f64>>)> {
        let t = self.len();
        let n = x.nrows();
        match self.mode {
            FusionMode::Equal => Ok((vec![MembershipVector::equal(t); n], None)),
            FusionMode::Manual => {
                let ids = task_ids.ok_or(Error::MissingTaskId)?;
                if ids.len() != n {
                    return Err(Error::dim("manual task ids", n, ids.len()));
                }
                let ms = ids
                    .iter()
                    .map(|&id| {
                        if id >= t {
                            Err(Error::InvalidArgument(format!("task id {id} outside the {t} ensemble slots")))
                        } else {
                            Ok(MembershipVector::one_hot(t, id))
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok((ms, None))
            }
            FusionMode::Dynamic => {
                let scores = self.outlier_scores(x)?;
                let ms = scores
                    .outer_iter()
                    .map(|row| membership(row.as_slice().expect("row-major"), self.beta))
                    .collect::<Result<_>>()?;
                Ok((ms, Some(scores)))
            }
        }
    }

    /// Predicts a batch of probes. `task_ids` is consulted in manual mode.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>, task_ids: Option<&[usize]>) -> Result<Vec<Prediction>> {
        if self.is_empty() {
            return Err(Error::Empty("prediction with an empty ensemble".into()));
        }
        let probs: Vec<Array2<f64>> = self.slots.iter().map(|s| s.expert.predict_batch(x)).collect::<Result<_>>()?;
        let (ms, scores) = self.memberships(x, task_ids)?;
        let mut out = Vec::with_capacity(x.nrows());
        for (i, m) in ms.into_iter().enumerate() {
            let expert_probs: Vec<Vec<f64>> = probs.iter().map(|p| p.row(i).to_vec()).collect();
            let refs: Vec<&[f64]> = expert_probs.iter().map(|p| p.as_slice()).collect();
            let fused = fuse(&refs, &m)?;
            out.push(Prediction {
                fused,
                membership: m,
                expert_probs,
                outlier_scores: scores.as_ref().map(|s| s.row(i).to_vec()),
            });
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f64], task_id: Option<usize>) -> Result<Prediction> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let ids = task_id.map(|t| vec![t]);
        Ok(self
            .predict_batch(view, ids.as_deref())?
            .pop()
            .expect("one probe in, one prediction out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Samples;
    use crate::indomain::{DistanceKind, DmConfig};
    use crate::rng::Rng;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn one_hot_selects_expert() {
        let s1 = [0.3, 0.7];
        let s2 = [0.9, 0.1];
        let out = fuse(&[&s1, &s2], &MembershipVector(vec![1.0, 0.0])).unwrap();
        assert_eq!(out, vec![0.3, 0.7]);
    }

    #[test]
    fn half_half() {
        let out = fuse(&[&[1.0, 0.0], &[0.0, 1.0]], &MembershipVector(vec![0.5, 0.5])).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn three_experts_match_weighted_sum() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let experts: Vec<Vec<f64>> = (0..3)
                .map(|_| crate::nn::softmax_row(&[rng.normal(0.0, 2.0), rng.normal(0.0, 2.0), rng.normal(0.0, 2.0)]))
                .collect();
            let m = crate::indomain::membership(&[rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)], 1.0).unwrap();
            let refs: Vec<&[f64]> = experts.iter().map(|e| e.as_slice()).collect();
            let got = fuse(&refs, &m).unwrap();
            for c in 0..3 {
                let mut want = 0.0;
                for t in 0..3 {
                    want += m.0[t] * experts[t][c];
                }
                assert!((got[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(fuse(&[&[1.0, 0.0]], &MembershipVector(vec![0.5, 0.5])).is_err());
        assert!(fuse(&[&[1.0, 0.0], &[1.0]], &MembershipVector(vec![0.5, 0.5])).is_err());
    }

    fn toy_task(offset: f64, seed: u64) -> Samples {
        let mut rng = Rng::new(seed);
        let n = 120;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x[[i, 0]] = offset + rng.normal(if c == 0 { -1.0 } else { 1.0 }, 0.2);
            x[[i, 1]] = offset + rng.normal(0.0, 0.2);
            y.push(c);
        }
        Samples::from_labeled(x, y).unwrap()
    }

    fn toy_ensemble(mode: FusionMode) -> (EnsembleState, Vec<Samples>) {
        let cfg = ExpertConfig {
            hidden: vec![8],
            epochs: 5,
            batch_size: 16,
            ..ExpertConfig::default()
        };
        let mut state = EnsembleState::new(mode, 1.0);
        let mut tasks = Vec::new();
        for (t, off) in [0.0, 20.0].into_iter().enumerate() {
            let data = toy_task(off, t as u64);
            let mut rng = Rng::new(10 + t as u64);
            let expert = train_expert(t, &data, &cfg, &mut rng).unwrap();
            let fe = crate::nn::DenseNet::new(&[2, 2], crate::nn::Activation::Identity, crate::nn::Activation::Identity, &mut rng).unwrap();
            let center = crate::losses::update_center_epoch(&fe, data.inputs()).unwrap();
            let dm = InDomainModel::fit(
                fe,
                center,
                data.inputs(),
                DistanceKind::Lof,
                &DmConfig {
                    k: 5,
                    ..DmConfig::default()
                },
                &mut rng,
            )
            .unwrap();
            state.push(expert, Some(TaskScorer::Single(dm)));
            tasks.push(data);
        }
        (state, tasks)
    }

    #[test]
    fn single_slot_returns_sole_expert() {
        let (full, tasks) = toy_ensemble(FusionMode::Dynamic);
        for mode in [FusionMode::Dynamic, FusionMode::Equal, FusionMode::Manual] {
            let mut one = EnsembleState::new(mode, 1.0);
            one.push(full.slots()[0].expert.clone(), full.slots()[0].in_domain.clone());
            let x = tasks[0].inputs().row(3).to_vec();
            let p = one.predict(&x, Some(0)).unwrap();
            assert_eq!(p.fused, one.slots()[0].expert.predict(&x).unwrap());
        }
    }

    #[test]
    fn equal_mode_is_mean() {
        let (mut state, tasks) = toy_ensemble(FusionMode::Dynamic);
        state.mode = FusionMode::Equal;
        let x = tasks[1].inputs().row(0).to_vec();
        let p = state.predict(&x, None).unwrap();
        for c in 0..2 {
            let want = 0.5 * (p.expert_probs[0][c] + p.expert_probs[1][c]);
            assert!((p.fused[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn manual_mode_needs_task_id_and_is_exact() {
        let (mut state, tasks) = toy_ensemble(FusionMode::Dynamic);
        state.mode = FusionMode::Manual;
        let x = tasks[1].inputs().row(0).to_vec();
        assert!(matches!(state.predict(&x, None), Err(Error::MissingTaskId)));
        let p = state.predict(&x, Some(1)).unwrap();
        let direct = state.slots()[1].expert.predict(&x).unwrap();
        assert_eq!(
            p.fused.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dynamic_mode_prefers_own_task() {
        let (state, tasks) = toy_ensemble(FusionMode::Dynamic);
        for (t, data) in tasks.iter().enumerate() {
            let preds = state.predict_batch(data.inputs(), None).unwrap();
            let hits = preds.iter().filter(|p| p.membership.argmax() == t).count();
            assert!(hits as f64 >= 0.9 * preds.len() as f64);
        }
    }

    #[test]
    fn dynamic_mode_requires_in_domain() {
        let (full, tasks) = toy_ensemble(FusionMode::Dynamic);
        let mut state = EnsembleState::new(FusionMode::Dynamic, 1.0);
        state.push(full.slots()[0].expert.clone(), None);
        assert!(matches!(
            state.predict(&tasks[0].inputs().row(0).to_vec(), None),
            Err(Error::MissingInDomain(0))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn fusion_stays_a_distribution(
            logits in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..6),
            raw in proptest::collection::vec(0.1f64..10.0, 6),
        ) {
            let t = logits.len();
            let probs: Vec<Vec<f64>> = logits.iter().map(|l| crate::nn::softmax_row(l)).collect();
            let m = crate::indomain::membership(&raw[..t], 1.0).unwrap();
            let refs: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
            let s = fuse(&refs, &m).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
