//! Accuracy bookkeeping and evaluation metrics.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::ensemble::EnsembleState;
use crate::error::{Error, Result};

/// `R[i][j]`: accuracy (percent) on task j's test set after training stage i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            entries: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, stage: usize, task: usize, acc: f64) -> Result<()> {
        let t = self.tasks();
        if stage >= t || task >= t {
            return Err(Error::InvalidArgument(format!("entry ({stage}, {task}) outside a {t}x{t} matrix")));
        }
        if !(0.0..=100.0).contains(&acc) {
            return Err(Error::InvalidArgument(format!("accuracy {acc} outside [0, 100]")));
        }
        self.entries[stage][task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.entries.get(stage)?.get(task).copied().flatten()
    }

    fn require(&self, stage: usize, task: usize) -> Result<f64> {
        self.get(stage, task).ok_or(Error::MissingEntry { row: stage, col: task })
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.entries
    }

    /// Accuracies on tasks `0..=stage` after `stage`.
    pub fn stage_accuracies(&self, stage: usize) -> Result<Vec<f64>> {
        (0..=stage).map(|j| self.require(stage, j)).collect()
    }

    /// Average over all tasks after the final stage.
    pub fn final_average(&self) -> Result<f64> {
        let t = self.tasks();
        if t == 0 {
            return Err(Error::Empty("accuracy matrix".into()));
        }
        average_accuracy(&self.stage_accuracies(t - 1)?)
    }
}

pub fn average_accuracy(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Empty("average over zero tasks".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// `(1/(T−1)) Σ_{i<T} (R[T][i] − R[i][i])`, zero-indexed here.
pub fn backward_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("backward transfer needs at least 2 tasks, got {t}")));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += r.require(t - 1, i)? - r.require(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// True detection rate (percent) at a bonafide false detection rate of at
/// most `fdr_target` percent. Higher scores are more attack-like; a sample is
/// flagged when its score is at or above the threshold, and the threshold is
/// the smallest one meeting the target.
pub fn tdr_at_fdr(bonafide: &[f64], attack: &[f64], fdr_target: f64) -> Result<f64> {
    if bonafide.is_empty() || attack.is_empty() {
        return Err(Error::Empty("tdr_at_fdr needs bonafide and attack scores".into()));
    }
    if !(fdr_target >= 0.0) {
        return Err(Error::InvalidArgument(format!("fdr target must be non-negative, got {fdr_target}")));
    }
    if bonafide.iter().chain(attack).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("detection scores".into()));
    }
    let n = bonafide.len();
    let allowed = (0..=n).rev().find(|&c| c as f64 * 100.0 / n as f64 <= fdr_target).unwrap_or(0);
    if allowed >= n {
        return Ok(100.0);
    }
    let mut sorted = bonafide.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Any threshold above the (allowed+1)-th largest bonafide score passes.
    let bound = sorted[allowed];
    let hits = attack.iter().filter(|&&a| a > bound).count();
    Ok(100.0 * hits as f64 / attack.len() as f64)
}

/// `bins` equal-width counts of values in [0, 1]; 1.0 lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 {
        return counts;
    }
    for &v in values {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    counts
}

/// Task-identification diagnostics for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// Percent of probes whose largest membership is their own task.
    pub accuracy: f64,
    /// Per true task: histogram of the membership assigned to that task.
    pub histograms: Vec<Vec<usize>>,
    pub bins: usize,
}

/// Argmax-membership accuracy over the test sets of `tasks`, plus per-task
/// histograms of own-task membership.
pub fn membership_accuracy(ensemble: &EnsembleState, tasks: &[TaskDataset], bins: usize) -> Result<MembershipReport> {
    let mut own = Vec::with_capacity(tasks.len());
    let mut winners = Vec::with_capacity(tasks.len());
    for task in tasks {
        let ids = vec![task.task_id; task.test.len()];
        let preds = ensemble.predict_batch(task.test.inputs(), Some(&ids))?;
        own.push(preds.iter().map(|p| p.membership.0[task.task_id]).collect::<Vec<_>>());
        winners.push(preds.iter().map(|p| p.membership.argmax()).collect::<Vec<_>>());
    }
    Ok(membership_report(tasks.iter().map(|t| t.task_id), &own, &winners, bins))
}

/// Builds a [`MembershipReport`] from per-task own-membership values and argmax winners.
pub fn membership_report(
    task_ids: impl IntoIterator<Item = usize>,
    own: &[Vec<f64>],
    winners: &[Vec<usize>],
    bins: usize,
) -> MembershipReport {
    let mut hits = 0;
    let mut total = 0;
    for (t, w) in task_ids.into_iter().zip(winners) {
        hits += w.iter().filter(|&&a| a == t).count();
        total += w.len();
    }
    MembershipReport {
        accuracy: if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 },
        histograms: own.iter().map(|o| histogram(o, bins)).collect(),
        bins,
    }
}

/// Row argmax for a `[n x T]` membership matrix (ties to the lowest index).
pub fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|r| crate::ensemble::argmax(r.as_slice().expect("row-major")))
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn averages() {
        assert_eq!(average_accuracy(&[100.0; 5]).unwrap(), 100.0);
        assert_eq!(average_accuracy(&[0.0, 100.0]).unwrap(), 50.0);
        assert!(average_accuracy(&[]).is_err());
        let v = [12.5, 99.0, 42.0, 73.25, 0.5];
        assert!((average_accuracy(&v).unwrap() - (12.5 + 99.0 + 42.0 + 73.25 + 0.5) / 5.0).abs() < 1e-12);
    }

    fn filled(t: usize, mut f: impl FnMut(usize, usize) -> f64) -> AccuracyMatrix {
        let mut r = AccuracyMatrix::new(t);
        for i in 0..t {
            for j in 0..=i {
                r.set(i, j, f(i, j)).unwrap();
            }
        }
        r
    }

    #[test]
    fn bwt_examples() {
        assert_eq!(backward_transfer(&filled(4, |_, _| 77.0)).unwrap(), 0.0);
        let mut r = AccuracyMatrix::new(2);
        r.set(0, 0, 90.0).unwrap();
        r.set(1, 0, 80.0).unwrap();
        r.set(1, 1, 95.0).unwrap();
        assert_eq!(backward_transfer(&r).unwrap(), -10.0);
    }

    #[test]
    fn bwt_three_tasks_by_hand() {
        let mut rng = Rng::new(8);
        let r = filled(3, |_, _| rng.uniform(0.0, 100.0));
        let want = ((r.get(2, 0).unwrap() - r.get(0, 0).unwrap()) + (r.get(2, 1).unwrap() - r.get(1, 1).unwrap())) / 2.0;
        assert!((backward_transfer(&r).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bwt_missing_entry() {
        let mut r = filled(3, |_, _| 50.0);
        r.entries[1][1] = None;
        assert!(matches!(backward_transfer(&r), Err(Error::MissingEntry { row: 1, col: 1 })));
        assert!(backward_transfer(&AccuracyMatrix::new(1)).is_err());
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let mut r = AccuracyMatrix::new(2);
        assert!(r.set(0, 0, 100.5).is_err());
        assert!(r.set(2, 0, 50.0).is_err());
    }

    /// Sweeps every observed score (and +inf) as a threshold and keeps the
    /// smallest one whose bonafide flag rate meets the target.
    fn sweep_oracle(bonafide: &[f64], attack: &[f64], fdr: f64) -> f64 {
        let mut candidates: Vec<f64> = bonafide.iter().chain(attack).copied().collect();
        candidates.push(f64::INFINITY);
        candidates.sort_by(f64::total_cmp);
        for th in candidates {
            let flagged = bonafide.iter().filter(|&&b| b >= th).count();
            if flagged as f64 * 100.0 / bonafide.len() as f64 <= fdr {
                return 100.0 * attack.iter().filter(|&&a| a >= th).count() as f64 / attack.len() as f64;
            }
        }
        unreachable!("+inf always qualifies")
    }

    #[test]
    fn tdr_examples() {
        assert_eq!(tdr_at_fdr(&[0.0, 0.1, 0.2], &[5.0, 6.0], 0.2).unwrap(), 100.0);
        assert!(tdr_at_fdr(&[], &[1.0], 1.0).is_err());
        let b = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9, 0.55, 0.3, 0.7, 0.6];
        let a = [0.5, 0.95, 0.85, 0.65, 0.9, 0.75, 0.2, 0.99, 0.6, 0.8];
        for fdr in [0.0, 5.0, 10.0, 20.0, 35.0, 50.0, 100.0] {
            assert_eq!(tdr_at_fdr(&b, &a, fdr).unwrap(), sweep_oracle(&b, &a, fdr), "fdr {fdr}");
        }
    }

    #[test]
    fn tdr_identical_distributions() {
        let mut rng = Rng::new(4);
        let b: Vec<f64> = (0..20000).map(|_| rng.normal(0.0, 1.0)).collect();
        let a: Vec<f64> = (0..20000).map(|_| rng.normal(0.0, 1.0)).collect();
        let tdr = tdr_at_fdr(&b, &a, 10.0).unwrap();
        assert!((tdr - 10.0).abs() < 1.0, "{tdr}");
    }

    proptest! {
        #[test]
        fn tdr_matches_sweep_and_is_monotone(
            b in proptest::collection::vec(0u8..12, 1..30),
            a in proptest::collection::vec(0u8..12, 1..30),
            f1 in 0.0f64..100.0,
            f2 in 0.0f64..100.0,
        ) {
            // Small integer scores force plenty of ties.
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let t_lo = tdr_at_fdr(&b, &a, lo).unwrap();
            prop_assert_eq!(t_lo, sweep_oracle(&b, &a, lo));
            prop_assert!(t_lo <= tdr_at_fdr(&b, &a, hi).unwrap());
        }

        #[test]
        fn average_is_permutation_invariant(mut v in proptest::collection::vec(0.0f64..100.0, 1..10), seed in 0u64..1000) {
            let before = average_accuracy(&v).unwrap();
            Rng::new(seed).shuffle(&mut v);
            prop_assert!((average_accuracy(&v).unwrap() - before).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.019, 0.02, 1.0, 0.5], 50).iter().sum::<usize>(), 5);
        let h = histogram(&[0.0, 1.0], 50);
        assert_eq!(h[0], 1);
        assert_eq!(h[49], 1);
        assert_eq!(histogram(&[], 4), vec![0; 4]);
    }

    #[test]
    fn spread() {
        assert_eq!(sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), (32.0f64 / 7.0).sqrt());
        assert_eq!(sample_std(&[3.0]), 0.0);
    }
}
