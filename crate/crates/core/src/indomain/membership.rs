use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights over task experts; positive and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipVector(pub Vec<f64>);

impl MembershipVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Uniform weights.
    pub fn equal(t: usize) -> Self {
        Self(vec![1.0 / t as f64; t])
    }

    /// All weight on `task`.
    pub fn one_hot(t: usize, task: usize) -> Self {
        let mut m = vec![0.0; t];
        m[task] = 1.0;
        Self(m)
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Converts per-task outlier scores into memberships:
/// `softmax(β · (1/l₁, …, 1/l_T))`.
pub fn membership(outlier_scores: &[f64], beta: f64) -> Result<MembershipVector> {
    if outlier_scores.is_empty() {
        return Err(Error::Empty("membership over zero tasks".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    for (task, &score) in outlier_scores.iter().enumerate() {
        if !(score > 0.0) || !score.is_finite() {
            return Err(Error::NonPositiveScore { task, score });
        }
    }
    let logits: Vec<f64> = outlier_scores.iter().map(|l| beta / l).collect();
    Ok(MembershipVector(crate::nn::softmax_row(&logits)))
}
