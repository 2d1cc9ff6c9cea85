use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

/// Numerically stable softmax of one logit vector.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_row(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax_row(row.as_slice().expect("row-major"));
        row.assign(&ArrayView1::from(&p));
    }
    out
}

/// Mean cross-entropy of `logits` against integer labels, with the gradient
/// with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per logit row");
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logp = log_softmax_row(logits.row(i));
        loss -= logp[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    (loss / n as f64, grad)
}

/// Mean cross-entropy against soft targets (rows summing to one), with the
/// gradient with respect to the logits. Logits are divided by `temperature`
/// before the softmax.
pub fn soft_cross_entropy(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, temperature: f64) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(logits.dim(), targets.dim(), "targets shaped like logits");
    let scaled = logits.mapv(|z| z / temperature);
    let mut grad = softmax_rows(scaled.view());
    let mut loss = 0.0;
    for i in 0..n {
        let logp = log_softmax_row(scaled.row(i));
        for (j, lp) in logp.iter().enumerate() {
            loss -= targets[[i, j]] * lp;
        }
    }
    grad -= &targets;
    grad /= n as f64 * temperature;
    (loss / n as f64, grad)
}
