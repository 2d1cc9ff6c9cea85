//! Training objective for the feature extractor.
//!
//! Embeddings are pulled towards the training-set center (center loss) while
//! same-class pairs are pulled together on the unit sphere around that center
//! (mean-shifted intra-class contrastive loss). The center is a constant
//! during backpropagation; it is refreshed once per epoch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseNet, NetGrads};

/// Embeddings closer than this to the center have no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Center(pub Array1<f64>);

impl Center {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    pub epochs: usize,
    /// Pairs per batch (each pair contributes two embeddings).
    pub batch_pairs: usize,
    pub lr: f64,
    /// Batches per epoch; `None` means enough to draw about one embedding
    /// per training sample.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// Optional cap on the global gradient norm of each step.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            epochs: 100,
            batch_pairs: 15,
            lr: 1e-5,
            batches_per_epoch: None,
            clip_norm: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::InvalidArgument("batch_pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::InvalidArgument("batches_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Elementwise mean of the embedding rows.
pub fn compute_center(embeddings: ArrayView2<'_, f64>) -> Result<Center> {
    if embeddings.nrows() == 0 {
        return Err(Error::Empty("center of an empty embedding set".into()));
    }
    Ok(Center(embeddings.mean_axis(Axis(0)).expect("non-empty")))
}

/// Squared distance to the center and its gradient `2(φ − c)`.
pub fn center_loss(phi: ArrayView1<'_, f64>, c: &Center) -> Result<(f64, Array1<f64>)> {
    if phi.len() != c.dim() {
        return Err(Error::dim("center loss embedding", c.dim(), phi.len()));
    }
    let diff = &phi - &c.0;
    let loss = diff.dot(&diff);
    Ok((loss, diff * 2.0))
}

/// `(φ − c) / ‖φ − c‖`.
pub fn mean_shift(phi: ArrayView1<'_, f64>, c: &Center) -> Result<Array1<f64>> {
    if phi.len() != c.dim() {
        return Err(Error::dim("mean shift embedding", c.dim(), phi.len()));
    }
    let diff = &phi - &c.0;
    let norm = diff.dot(&diff).sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateEmbedding { index: 0, distance: norm });
    }
    Ok(diff / norm)
}

#[derive(Debug, Clone)]
pub struct MsicOutput {
    /// Mean over the `2N` anchors.
    pub loss: f64,
    /// Gradient with respect to each input embedding `φ`, `[2N x D]`.
    pub grad_phi: Array2<f64>,
}

/// Mean-shifted intra-class contrastive loss over `2N` embeddings laid out as
/// consecutive pairs (rows `2i`, `2i + 1`).
///
/// For anchor `a` with partner `p`, the term is
/// `−log( exp(θa·θp/τ) / Σ_{j≠a} exp(θa·θj/τ) )`, where `j` ranges over all
/// other embeddings of the batch, positive included.
pub fn msic_loss(embeddings: ArrayView2<'_, f64>, c: &Center, tau: f64) -> Result<MsicOutput> {
    let m = embeddings.nrows();
    if m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("pair layout needs an even row count, got {m}")));
    }
    if m / 2 < 2 {
        return Err(Error::TooFewPairs(m / 2));
    }
    if embeddings.ncols() != c.dim() {
        return Err(Error::dim("msic embedding", c.dim(), embeddings.ncols()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }

    let shifted = &embeddings - &c.0;
    let mut norms = Array1::zeros(m);
    for (i, row) in shifted.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { index: i, distance: n });
        }
        norms[i] = n;
    }
    let theta = &shifted / &norms.view().insert_axis(Axis(1));

    let logits = theta.dot(&theta.t()) / tau;
    // dL/dlogits, already divided by the anchor count.
    let mut g = Array2::<f64>::zeros((m, m));
    let mut loss = 0.0;
    for a in 0..m {
        let partner = a ^ 1;
        let row = logits.row(a);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != a)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if j != a {
                denom += (v - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - row[partner];
        for (j, &v) in row.iter().enumerate() {
            if j != a {
                g[[a, j]] = (v - lse).exp() / m as f64;
            }
        }
        g[[a, partner]] -= 1.0 / m as f64;
    }
    loss /= m as f64;

    // logits = ΘΘᵀ/τ  ⇒  dΘ = (G + Gᵀ)Θ/τ
    let sym = &g + &g.t();
    let grad_theta = sym.dot(&theta) / tau;
    // θ = u/‖u‖  ⇒  du = (dθ − (dθ·θ)θ)/‖u‖
    let mut grad_phi = grad_theta;
    for ((mut gr, th), &n) in grad_phi.axis_iter_mut(Axis(0)).zip(theta.axis_iter(Axis(0))).zip(norms.iter()) {
        let proj = gr.dot(&th);
        gr.scaled_add(-proj, &th);
        gr /= n;
    }
    Ok(MsicOutput { loss, grad_phi })
}

/// Batch objective value and its parameter gradient.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `center + msic`.
    pub total: f64,
    /// `(1/N) Σ` of the center loss over all `2N` embeddings, i.e. the
    /// per-pair mean of `ℓc(x′) + ℓc(x″)`.
    pub center: f64,
    /// Mean contrastive term, zero when fewer than two usable pairs remain.
    pub msic: f64,
    /// Pairs that took part in the contrastive term.
    pub msic_pairs: usize,
    pub grads: NetGrads,
}

/// Gradient of the objective with respect to the embeddings only.
#[derive(Debug, Clone)]
pub struct EmbeddingObjective {
    pub total: f64,
    pub center: f64,
    pub msic: f64,
    pub msic_pairs: usize,
    pub grad_phi: Array2<f64>,
}

/// Center + contrastive objective evaluated on embeddings laid out as pairs.
/// Pairs with a degenerate member are left out of the contrastive term; the
/// center term always covers every embedding.
pub fn embedding_objective(embeddings: ArrayView2<'_, f64>, c: &Center, tau: f64) -> Result<EmbeddingObjective> {
    let m = embeddings.nrows();
    if m % 2 != 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "pair layout needs a positive even row count, got {m}"
        )));
    }
    if embeddings.ncols() != c.dim() {
        return Err(Error::dim("objective embedding", c.dim(), embeddings.ncols()));
    }
    let n_pairs = m / 2;
    let diff = &embeddings - &c.0;
    let center = diff.mapv(|v| v * v).sum() / n_pairs as f64;
    let mut grad_phi = diff.clone() * (2.0 / n_pairs as f64);

    let usable: Vec<usize> = (0..n_pairs)
        .filter(|&i| {
            let a = diff.row(2 * i);
            let b = diff.row(2 * i + 1);
            a.dot(&a).sqrt() >= DEGENERATE_NORM && b.dot(&b).sqrt() >= DEGENERATE_NORM
        })
        .collect();
    let mut msic = 0.0;
    if usable.len() >= 2 {
        let rows: Vec<usize> = usable.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        let sub = embeddings.select(Axis(0), &rows);
        let out = msic_loss(sub.view(), c, tau)?;
        msic = out.loss;
        for (k, &r) in rows.iter().enumerate() {
            let mut dst = grad_phi.row_mut(r);
            dst += &out.grad_phi.row(k);
        }
    }
    Ok(EmbeddingObjective {
        total: center + msic,
        center,
        msic,
        msic_pairs: if usable.len() >= 2 { usable.len() } else { 0 },
        grad_phi,
    })
}

/// Full objective for a batch of pair inputs (rows `2i`, `2i + 1`),
/// backpropagated into the feature extractor's parameters.
pub fn total_loss(fe: &DenseNet, pair_inputs: ArrayView2<'_, f64>, c: &Center, tau: f64) -> Result<Objective> {
    let (phi, cache) = fe.forward(pair_inputs)?;
    let obj = embedding_objective(phi.view(), c, tau)?;
    let back = fe.backward(&cache, obj.grad_phi.view())?;
    Ok(Objective {
        total: obj.total,
        center: obj.center,
        msic: obj.msic,
        msic_pairs: obj.msic_pairs,
        grads: back.params,
    })
}

/// Recomputes the center as the mean embedding of `inputs`.
pub fn update_center_epoch(fe: &DenseNet, inputs: ArrayView2<'_, f64>) -> Result<Center> {
    if inputs.nrows() == 0 {
        return Err(Error::Empty("center update over an empty training set".into()));
    }
    let dim = fe.output_dim();
    let mut sum = Array1::<f64>::zeros(dim);
    // Chunked so large training sets never materialize every embedding.
    for chunk in inputs.axis_chunks_iter(Axis(0), 1024) {
        sum += &fe.predict(chunk)?.sum_axis(Axis(0));
    }
    Ok(Center(sum / inputs.nrows() as f64))
}
