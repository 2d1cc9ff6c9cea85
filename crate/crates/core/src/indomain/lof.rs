//! Exact local outlier factor in novelty mode.
//!
//! Training points are indexed once; queries are scored against the
//! training points only and never inserted. Neighborhoods follow Breunig et
//! al.: the k-distance neighborhood includes every point tied with the k-th
//! nearest one.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Added to the mean reachability distance before inverting it.
pub const LRD_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LofIndex {
    points: Array2<f64>,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

/// Squared Euclidean distance with independent partial sums so the loop
/// vectorizes.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f64>() + tail
}

/// k-distance and the tie-inclusive neighborhood of `query` among `points`,
/// skipping row `exclude`. `scratch` is reused across calls.
fn neighborhood(
    points: ArrayView2<'_, f64>,
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
    scratch: &mut Vec<f64>,
    out: &mut Vec<(usize, f64)>,
) -> f64 {
    scratch.clear();
    out.clear();
    for (j, row) in points.outer_iter().enumerate() {
        let d = if exclude == Some(j) {
            f64::INFINITY
        } else {
            sq_dist(query, row.as_slice().expect("row-major")).sqrt()
        };
        scratch.push(d);
    }
    let mut sorted = scratch.clone();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    let k_dist = *kth;
    for (j, &d) in scratch.iter().enumerate() {
        if d <= k_dist && exclude != Some(j) {
            out.push((j, d));
        }
    }
    k_dist
}

impl LofIndex {
    /// Indexes `points` (`[n x D]`) with `k` neighbors; requires `n > k ≥ 1`.
    pub fn fit(points: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let n = points.nrows();
        if k == 0 || n <= k {
            return Err(Error::TooFewPoints { n, k });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LOF training embeddings".into()));
        }
        let points = points.as_standard_layout().into_owned();
        let mut k_distance = Vec::with_capacity(n);
        let mut neighbors: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut scratch = Vec::with_capacity(n);
        let mut hood = Vec::new();
        for (i, row) in points.outer_iter().enumerate() {
            let kd = neighborhood(
                points.view(),
                row.as_slice().expect("row-major"),
                k,
                Some(i),
                &mut scratch,
                &mut hood,
            );
            k_distance.push(kd);
            neighbors.push(hood.clone());
        }
        let lrd = neighbors
            .iter()
            .map(|hood| {
                let reach: f64 = hood.iter().map(|&(o, d)| k_distance[o].max(d)).sum();
                1.0 / (reach / hood.len() as f64 + LRD_EPSILON)
            })
            .collect();
        Ok(Self {
            points,
            k,
            k_distance,
            lrd,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distance
    }

    pub fn lrd(&self) -> &[f64] {
        &self.lrd
    }

    /// LOF of the training point at `row` (its own neighborhood excludes it).
    pub fn training_lof(&self, row: usize) -> f64 {
        let mut scratch = Vec::with_capacity(self.len());
        let mut hood = Vec::new();
        let q = self.points.row(row);
        neighborhood(
            self.points.view(),
            q.as_slice().expect("row-major"),
            self.k,
            Some(row),
            &mut scratch,
            &mut hood,
        );
        let mean_lrd: f64 = hood.iter().map(|&(o, _)| self.lrd[o]).sum::<f64>() / hood.len() as f64;
        mean_lrd / self.lrd[row]
    }

    /// Novelty-mode LOF of `query`.
    pub fn score(&self, query: ArrayView1<'_, f64>) -> Result<f64> {
        let mut scratch = Vec::with_capacity(self.len());
        let mut hood = Vec::new();
        self.score_with(query, &mut scratch, &mut hood)
    }

    pub fn score_batch(&self, queries: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut scratch = Vec::with_capacity(self.len());
        let mut hood = Vec::new();
        queries.outer_iter().map(|q| self.score_with(q, &mut scratch, &mut hood)).collect()
    }

    fn score_with(&self, query: ArrayView1<'_, f64>, scratch: &mut Vec<f64>, hood: &mut Vec<(usize, f64)>) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(Error::dim("LOF query", self.dim(), query.len()));
        }
        let owned;
        let q = match query.as_slice() {
            Some(s) => s,
            None => {
                owned = query.to_vec();
                &owned
            }
        };
        neighborhood(self.points.view(), q, self.k, None, scratch, hood);
        let reach: f64 = hood.iter().map(|&(o, d)| self.k_distance[o].max(d)).sum();
        let lrd_q = 1.0 / (reach / hood.len() as f64 + LRD_EPSILON);
        let mean_lrd: f64 = hood.iter().map(|&(o, _)| self.lrd[o]).sum::<f64>() / hood.len() as f64;
        Ok(mean_lrd / lrd_q)
    }

    pub(crate) fn from_parts(points: Array2<f64>, k: usize, k_distance: Vec<f64>, lrd: Vec<f64>) -> Result<Self> {
        let n = points.nrows();
        if k == 0 || n <= k || k_distance.len() != n || lrd.len() != n {
            return Err(Error::Format("inconsistent LOF index".into()));
        }
        Ok(Self {
            points,
            k,
            k_distance,
            lrd,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::array;

    /// O(n²) reference that materializes the full distance matrix.
    struct Brute {
        d: Vec<Vec<f64>>,
        kd: Vec<f64>,
        lrd: Vec<f64>,
        k: usize,
        pts: Array2<f64>,
    }

    fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    impl Brute {
        fn new(pts: &Array2<f64>, k: usize) -> Self {
            let n = pts.nrows();
            let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(pts.row(i), pts.row(j))).collect()).collect();
            let kd: Vec<f64> = (0..n)
                .map(|i| {
                    let mut o: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
                    o.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    o[k - 1]
                })
                .collect();
            let lrd = (0..n)
                .map(|i| {
                    let hood: Vec<usize> = (0..n).filter(|&j| j != i && d[i][j] <= kd[i]).collect();
                    let r: f64 = hood.iter().map(|&o| kd[o].max(d[i][o])).sum::<f64>() / hood.len() as f64;
                    1.0 / (r + LRD_EPSILON)
                })
                .collect();
            Self {
                d,
                kd,
                lrd,
                k,
                pts: pts.clone(),
            }
        }

        fn query(&self, q: ArrayView1<f64>) -> f64 {
            let n = self.pts.nrows();
            let dq: Vec<f64> = (0..n).map(|j| dist(q, self.pts.row(j))).collect();
            let mut s = dq.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let kd = s[self.k - 1];
            let hood: Vec<usize> = (0..n).filter(|&j| dq[j] <= kd).collect();
            let r: f64 = hood.iter().map(|&o| self.kd[o].max(dq[o])).sum::<f64>() / hood.len() as f64;
            let lrd_q = 1.0 / (r + LRD_EPSILON);
            hood.iter().map(|&o| self.lrd[o]).sum::<f64>() / hood.len() as f64 / lrd_q
        }
    }

    #[test]
    fn collinear_equidistant_symmetric() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let idx = LofIndex::fit(pts.view(), 1).unwrap();
        // Middle point: both neighbors tie at distance 1.
        assert!(idx.lrd().iter().all(|&l| (l - idx.lrd()[0]).abs() < 1e-12));
    }

    #[test]
    fn matches_bruteforce_uniform_2d() {
        let mut rng = Rng::new(99);
        let pts = Array2::from_shape_simple_fn((100, 2), || rng.uniform(0.0, 1.0));
        let idx = LofIndex::fit(pts.view(), 5).unwrap();
        let brute = Brute::new(&pts, 5);
        for i in 0..100 {
            assert!((idx.lrd()[i] - brute.lrd[i]).abs() <= 1e-9 * brute.lrd[i]);
            assert!((idx.k_distances()[i] - brute.kd[i]).abs() <= 1e-12);
        }
        for _ in 0..50 {
            let q = Array1::from_shape_simple_fn(2, || rng.uniform(-0.5, 1.5));
            let a = idx.score(q.view()).unwrap();
            let b = brute.query(q.view());
            assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
        }
        let _ = &brute.d;
    }

    use ndarray::Array1;

    #[test]
    fn duplicates_stay_finite() {
        let mut pts = Array2::zeros((13, 2));
        for i in 10..13 {
            pts[[i, 0]] = i as f64;
        }
        let idx = LofIndex::fit(pts.view(), 3).unwrap();
        assert!(idx.lrd().iter().all(|l| l.is_finite() && *l > 0.0));
        let s = idx.score(array![0.0, 0.0].view()).unwrap();
        assert!(s.is_finite() && s > 0.0);
    }

    #[test]
    fn inlier_near_one_far_point_large() {
        let mut rng = Rng::new(12);
        let pts = Array2::from_shape_simple_fn((400, 2), || rng.uniform(0.0, 1.0));
        let idx = LofIndex::fit(pts.view(), 20).unwrap();
        let on_point = idx.score(pts.row(17)).unwrap();
        assert!((on_point - 1.0).abs() < 0.15, "{on_point}");
        let far = idx.score(array![15.0, 15.0].view()).unwrap();
        assert!(far > 1.5, "{far}");
    }

    #[test]
    fn too_few_points() {
        let pts = Array2::<f64>::zeros((3, 2));
        assert!(matches!(LofIndex::fit(pts.view(), 3), Err(Error::TooFewPoints { n: 3, k: 3 })));
        assert!(LofIndex::fit(pts.view(), 0).is_err());
    }

    #[test]
    fn query_dimension_checked() {
        let pts = Array2::<f64>::zeros((5, 2));
        let idx = LofIndex::fit(pts.view(), 2).unwrap();
        assert!(matches!(idx.score(array![1.0].view()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn sq_dist_matches_naive() {
        let mut rng = Rng::new(1);
        for len in [1, 7, 8, 9, 128, 131] {
            let a: Vec<f64> = (0..len).map(|_| rng.normal(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.normal(0.0, 1.0)).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!((sq_dist(&a, &b) - naive).abs() <= 1e-12 * naive.max(1.0));
        }
    }
}
