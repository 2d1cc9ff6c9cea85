use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Gaussian fit of a task's embeddings, scored by Mahalanobis distance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    mean: Array1<f64>,
    inv_cov: Array2<f64>,
    eps: f64,
    per_dim: bool,
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of `L Lᵀ` by forward and back substitution against the identity.
fn cholesky_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // L⁻¹ (lower triangular)
    let mut linv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = s / l[[i, i]];
        }
    }
    let mut inv = linv.t().dot(&linv);
    // Exact symmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

impl GaussianModel {
    /// Mean and unbiased covariance of `embeddings` (`[n x D]`, `n ≥ 2`),
    /// regularized by `eps · I` before inversion.
    pub fn fit(embeddings: ArrayView2<'_, f64>, eps: f64) -> Result<Self> {
        let n = embeddings.nrows();
        if n < 2 {
            return Err(Error::TooFewPoints { n, k: 1 });
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("regularizer must be positive, got {eps}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Mahalanobis training embeddings".into()));
        }
        let mean = embeddings.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &embeddings - &mean;
        let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        for i in 0..cov.nrows() {
            cov[[i, i]] += eps;
        }
        let l = cholesky(&cov)?;
        let inv_cov = cholesky_inverse(&l);
        Ok(Self {
            mean,
            inv_cov,
            eps,
            per_dim: false,
        })
    }

    /// Divides reported distances by `sqrt(D)`, so an inlier of a well fitted
    /// Gaussian scores about 1 whatever the embedding width.
    pub fn per_dimension(mut self, on: bool) -> Self {
        self.per_dim = on;
        self
    }

    pub fn is_per_dimension(&self) -> bool {
        self.per_dim
    }

    fn finish(&self, q: f64) -> f64 {
        let q = q.max(0.0);
        if self.per_dim {
            (q / self.dim() as f64).sqrt()
        } else {
            q.sqrt()
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn inverse_covariance(&self) -> ArrayView2<'_, f64> {
        self.inv_cov.view()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `sqrt((q − μ)ᵀ Σ⁻¹ (q − μ))`, over `sqrt(D)` in per-dimension mode.
    pub fn score(&self, query: ArrayView1<'_, f64>) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(Error::dim("Mahalanobis query", self.dim(), query.len()));
        }
        let u = &query - &self.mean;
        Ok(self.finish(u.dot(&self.inv_cov.dot(&u))))
    }

    pub fn score_batch(&self, queries: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if queries.ncols() != self.dim() {
            return Err(Error::dim("Mahalanobis query", self.dim(), queries.ncols()));
        }
        let u = &queries - &self.mean;
        let w = u.dot(&self.inv_cov);
        Ok((&u * &w).sum_axis(Axis(1)).iter().map(|&q| self.finish(q)).collect())
    }

    pub(crate) fn from_parts(mean: Array1<f64>, inv_cov: Array2<f64>, eps: f64, per_dim: bool) -> Result<Self> {
        if inv_cov.dim() != (mean.len(), mean.len()) {
            return Err(Error::Format("inverse covariance shape does not match the mean".into()));
        }
        Ok(Self {
            mean,
            inv_cov,
            eps,
            per_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::array;

    #[test]
    fn two_point_mean() {
        let m = GaussianModel::fit(array![[0.0, 0.0], [2.0, 0.0]].view(), 1e-3).unwrap();
        assert_eq!(m.mean(), array![1.0, 0.0]);
        assert_eq!(m.score(array![1.0, 0.0].view()).unwrap(), 0.0);
    }

    #[test]
    fn inverse_is_inverse() {
        let mut rng = Rng::new(3);
        let x = Array2::from_shape_simple_fn((50, 6), || rng.normal(0.0, 2.0));
        let eps = 1e-3;
        let m = GaussianModel::fit(x.view(), eps).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let c = &x - &mean;
        let mut cov = c.t().dot(&c) / 49.0;
        for i in 0..6 {
            cov[[i, i]] += eps;
        }
        let prod = cov.dot(&m.inverse_covariance());
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identity_covariance_recovered() {
        let mut rng = Rng::new(4);
        let x = Array2::from_shape_simple_fn((10_000, 3), || rng.normal(0.0, 1.0));
        let m = GaussianModel::fit(x.view(), 1e-9).unwrap();
        let inv = m.inverse_covariance();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((inv[[i, j]] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn euclidean_under_identity() {
        let m = GaussianModel::from_parts(array![1.0, 1.0], Array2::eye(2), 1e-3, false).unwrap();
        assert!((m.score(array![4.0, 5.0].view()).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn matches_quadratic_form_oracle() {
        let mut rng = Rng::new(5);
        let x = Array2::from_shape_simple_fn((40, 4), || rng.normal(0.0, 1.0));
        let m = GaussianModel::fit(x.view(), 1e-2).unwrap();
        let queries = Array2::from_shape_simple_fn((10, 4), || rng.normal(0.0, 3.0));
        let batch = m.score_batch(queries.view()).unwrap();
        for (qi, q) in queries.outer_iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    acc += (q[i] - m.mean()[i]) * m.inverse_covariance()[[i, j]] * (q[j] - m.mean()[j]);
                }
            }
            let want = acc.sqrt();
            assert!((m.score(q).unwrap() - want).abs() <= 1e-10 * want.max(1.0));
            assert!((batch[qi] - want).abs() <= 1e-10 * want.max(1.0));
        }
    }

    #[test]
    fn errors() {
        assert!(GaussianModel::fit(array![[1.0, 2.0]].view(), 1e-3).is_err());
        assert!(matches!(
            GaussianModel::fit(array![[1.0, f64::NAN], [0.0, 0.0]].view(), 1e-3),
            Err(Error::NonFinite(_))
        ));
        let m = GaussianModel::fit(array![[0.0, 0.0], [2.0, 0.0]].view(), 1e-3).unwrap();
        assert!(m.score(array![1.0].view()).is_err());
    }

    #[test]
    fn per_dimension_scaling() {
        let m = GaussianModel::from_parts(array![0.0, 0.0, 0.0, 0.0], Array2::eye(4), 1e-3, false).unwrap();
        let q = array![[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        let raw = m.score_batch(q.view()).unwrap();
        let m = m.per_dimension(true);
        let scaled = m.score_batch(q.view()).unwrap();
        for (r, s) in raw.iter().zip(&scaled) {
            assert!((s - r / 2.0).abs() < 1e-14);
        }
        assert!((m.score(q.row(1)).unwrap() - 1.0).abs() < 1e-14);
    }
}
