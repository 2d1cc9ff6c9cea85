//! Per-task in-domain models: a trained feature extractor plus a distance
//! measure fitted on the task's training embeddings. Their outlier scores
//! become expert memberships.

mod fe;
mod gaussian;
mod lof;
mod membership;

pub use fe::{train_feature_extractor, EpochStats, FeConfig, FeTraining};
pub use gaussian::GaussianModel;
pub use lof::{LofIndex, LRD_EPSILON};
pub use membership::{membership, MembershipVector};

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::losses::Center;
use crate::nn::DenseNet;
use crate::rng::Rng;

/// Mahalanobis distances are clamped here before inversion.
pub const MIN_DISTANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Lof,
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmConfig {
    /// LOF neighbor count.
    pub k: usize,
    /// Covariance regularizer for the Mahalanobis measure.
    pub eps: f64,
    /// Fit on a random subset of at most this many embeddings.
    #[serde(default)]
    pub max_points: Option<usize>,
    /// Report Mahalanobis distances divided by `sqrt(D)`.
    #[serde(default)]
    pub mahalanobis_per_dim: bool,
}

impl Default for DmConfig {
    fn default() -> Self {
        Self {
            k: 20,
            eps: 1e-6,
            max_points: None,
            mahalanobis_per_dim: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistanceMeasure {
    Lof(LofIndex),
    Mahalanobis(GaussianModel),
}

impl DistanceMeasure {
    pub fn fit(kind: DistanceKind, embeddings: ArrayView2<'_, f64>, cfg: &DmConfig) -> Result<Self> {
        Ok(match kind {
            DistanceKind::Lof => DistanceMeasure::Lof(LofIndex::fit(embeddings, cfg.k)?),
            DistanceKind::Mahalanobis => {
                DistanceMeasure::Mahalanobis(GaussianModel::fit(embeddings, cfg.eps)?.per_dimension(cfg.mahalanobis_per_dim))
            }
        })
    }

    pub fn kind(&self) -> DistanceKind {
        match self {
            DistanceMeasure::Lof(_) => DistanceKind::Lof,
            DistanceMeasure::Mahalanobis(_) => DistanceKind::Mahalanobis,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistanceMeasure::Lof(l) => l.dim(),
            DistanceMeasure::Mahalanobis(g) => g.dim(),
        }
    }

    /// Positive outlier score of one embedding.
    pub fn score(&self, embedding: ArrayView1<'_, f64>) -> Result<f64> {
        match self {
            DistanceMeasure::Lof(l) => l.score(embedding),
            DistanceMeasure::Mahalanobis(g) => Ok(g.score(embedding)?.max(MIN_DISTANCE)),
        }
    }

    pub fn score_batch(&self, embeddings: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            DistanceMeasure::Lof(l) => l.score_batch(embeddings),
            DistanceMeasure::Mahalanobis(g) => Ok(g.score_batch(embeddings)?.into_iter().map(|d| d.max(MIN_DISTANCE)).collect()),
        }
    }
}

/// Anything that scores how far inputs lie from a task's training data.
pub trait OutlierScorer {
    fn outlier_scores(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

/// SHA-256 over the feature extractor's shape, parameters and center.
pub fn fe_fingerprint(fe: &DenseNet, center: &Center) -> String {
    let mut h = Sha256::new();
    for (out, inp, act) in fe.encode_shape() {
        h.update((out as u64).to_le_bytes());
        h.update((inp as u64).to_le_bytes());
        h.update([act]);
    }
    for v in fe.params_flat() {
        h.update(v.to_le_bytes());
    }
    for v in center.0.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Embeds `inputs` in chunks.
pub fn embed(fe: &DenseNet, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((inputs.nrows(), fe.output_dim()));
    for (i, chunk) in inputs.axis_chunks_iter(Axis(0), 1024).enumerate() {
        let e = fe.predict(chunk)?;
        out.slice_mut(ndarray::s![i * 1024..i * 1024 + chunk.nrows(), ..]).assign(&e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InDomainModel {
    fe: DenseNet,
    center: Center,
    dm: DistanceMeasure,
    /// Fingerprint of the (fe, center) pair the measure was fitted on.
    dm_fingerprint: String,
}

impl InDomainModel {
    /// Fits a distance measure on the embeddings of `train_inputs`.
    pub fn fit(
        fe: DenseNet,
        center: Center,
        train_inputs: ArrayView2<'_, f64>,
        kind: DistanceKind,
        cfg: &DmConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embeddings = embed(&fe, train_inputs)?;
        Self::from_embeddings(fe, center, embeddings.view(), kind, cfg, rng)
    }

    /// Like [`InDomainModel::fit`], reusing precomputed training embeddings.
    pub fn from_embeddings(
        fe: DenseNet,
        center: Center,
        embeddings: ArrayView2<'_, f64>,
        kind: DistanceKind,
        cfg: &DmConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if center.dim() != fe.output_dim() {
            return Err(Error::dim("center", fe.output_dim(), center.dim()));
        }
        if embeddings.ncols() != fe.output_dim() {
            return Err(Error::dim("training embeddings", fe.output_dim(), embeddings.ncols()));
        }
        let dm = match cfg.max_points {
            Some(cap) if cap < embeddings.nrows() => {
                let mut rows = rng.permutation(embeddings.nrows());
                rows.truncate(cap);
                rows.sort_unstable();
                DistanceMeasure::fit(kind, embeddings.select(Axis(0), &rows).view(), cfg)?
            }
            _ => DistanceMeasure::fit(kind, embeddings, cfg)?,
        };
        let dm_fingerprint = fe_fingerprint(&fe, &center);
        Ok(Self {
            fe,
            center,
            dm,
            dm_fingerprint,
        })
    }

    /// Reassembles a model, checking that `dm` was fitted on `fe`/`center`.
    pub fn from_parts(fe: DenseNet, center: Center, dm: DistanceMeasure, dm_fingerprint: String) -> Result<Self> {
        if fe_fingerprint(&fe, &center) != dm_fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        if dm.dim() != fe.output_dim() || center.dim() != fe.output_dim() {
            return Err(Error::dim("distance measure", fe.output_dim(), dm.dim()));
        }
        Ok(Self {
            fe,
            center,
            dm,
            dm_fingerprint,
        })
    }

    pub fn fe(&self) -> &DenseNet {
        &self.fe
    }

    pub fn center(&self) -> &Center {
        &self.center
    }

    pub fn distance_measure(&self) -> &DistanceMeasure {
        &self.dm
    }

    pub fn fingerprint(&self) -> &str {
        &self.dm_fingerprint
    }

    pub fn embedding_dim(&self) -> usize {
        self.fe.output_dim()
    }

    pub fn embed(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        embed(&self.fe, inputs)
    }

    pub fn outlier_score(&self, input: &[f64]) -> Result<f64> {
        let e = self.fe.predict_one(input)?;
        self.dm.score(ArrayView1::from(&e))
    }
}

impl OutlierScorer for InDomainModel {
    fn outlier_scores(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let e = self.embed(inputs)?;
        self.dm.score_batch(e.view())
    }
}

/// Writes `sample_id,task_id,class,e_0,…,e_{D−1}` rows (with a header).
pub fn export_embeddings<W: Write>(out: &mut W, task_id: usize, samples: &Samples, embeddings: ArrayView2<'_, f64>) -> Result<()> {
    if embeddings.nrows() != samples.len() {
        return Err(Error::dim("embedding rows", samples.len(), embeddings.nrows()));
    }
    write!(out, "sample_id,task_id,class")?;
    for j in 0..embeddings.ncols() {
        write!(out, ",e_{j}")?;
    }
    writeln!(out)?;
    for (i, row) in embeddings.outer_iter().enumerate() {
        let s = samples.get(i);
        write!(out, "{},{},{}", s.source_index, task_id, s.class_id)?;
        for v in row.iter() {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;

    fn toy_model(kind: DistanceKind) -> (InDomainModel, Array2<f64>) {
        let mut rng = Rng::new(1);
        let fe = DenseNet::new(&[3, 8, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((60, 3), || rng.normal(0.0, 1.0));
        let center = crate::losses::update_center_epoch(&fe, x.view()).unwrap();
        let cfg = DmConfig {
            k: 5,
            ..DmConfig::default()
        };
        (InDomainModel::fit(fe, center, x.view(), kind, &cfg, &mut rng).unwrap(), x)
    }

    #[test]
    fn fingerprint_binds_measure_to_extractor() {
        let (m, _) = toy_model(DistanceKind::Lof);
        let again = InDomainModel::from_parts(m.fe.clone(), m.center.clone(), m.dm.clone(), m.dm_fingerprint.clone());
        assert!(again.is_ok());
        let mut other_fe = m.fe.clone();
        let mut p = other_fe.params_flat();
        p[0] += 1e-9;
        other_fe.set_params_flat(&p).unwrap();
        assert!(matches!(
            InDomainModel::from_parts(other_fe, m.center.clone(), m.dm.clone(), m.dm_fingerprint.clone()),
            Err(Error::FingerprintMismatch)
        ));
    }

    #[test]
    fn batch_and_single_scores_agree() {
        for kind in [DistanceKind::Lof, DistanceKind::Mahalanobis] {
            let (m, x) = toy_model(kind);
            let batch = m.outlier_scores(x.view()).unwrap();
            for (i, row) in x.outer_iter().enumerate() {
                let single = m.outlier_score(row.as_slice().unwrap()).unwrap();
                assert!((single - batch[i]).abs() <= 1e-12 * single.max(1.0));
                assert!(single > 0.0);
            }
        }
    }

    #[test]
    fn mahalanobis_zero_is_clamped() {
        let g = GaussianModel::fit(array![[0.0, 0.0], [2.0, 0.0], [1.0, 1.0]].view(), 1e-3).unwrap();
        let dm = DistanceMeasure::Mahalanobis(g);
        let mean = array![1.0, 1.0 / 3.0];
        assert_eq!(dm.score(mean.view()).unwrap(), MIN_DISTANCE);
    }

    #[test]
    fn export_format() {
        let samples = Samples::from_labeled(array![[0.0], [1.0]], vec![0, 1]).unwrap();
        let emb = array![[0.5, -1.0], [2.0, 0.25]];
        let mut buf = Vec::new();
        export_embeddings(&mut buf, 3, &samples, emb.view()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,task_id,class,e_0,e_1");
        assert!(lines[1].starts_with("0,3,0,"));
        assert!(lines[2].starts_with("1,3,1,"));
        assert_eq!(lines.len(), 3);
    }
}
