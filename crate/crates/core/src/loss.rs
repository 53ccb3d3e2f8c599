//! Batch-averaged losses with their analytic gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("softmax_cross_entropy labels", logits.rows(), labels.len()));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let batch = logits.rows().max(1) as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.row_mut(r)[y] -= 1.0;
    }
    Ok((loss / batch, grad.scale(1.0 / batch)))
}

/// Mean over rows of `1 − cos(h, t)` and its gradient with respect to `h`.
pub fn cosine_loss(h: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if !h.same_shape(targets) {
        return Err(Error::shape(
            "cosine_loss",
            format!("{}x{}", targets.rows(), targets.cols()),
            format!("{}x{}", h.rows(), h.cols()),
        ));
    }
    let batch = h.rows().max(1) as f64;
    let mut grad = Matrix::zeros(h.rows(), h.cols());
    let mut loss = 0.0;
    for r in 0..h.rows() {
        let (hr, tr) = (h.row(r), targets.row(r));
        let hn = hr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tn = tr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if hn == 0.0 || tn == 0.0 {
            return Err(Error::ZeroNorm(r));
        }
        let dot: f64 = hr.iter().zip(tr).map(|(a, b)| a * b).sum();
        let cos = dot / (hn * tn);
        loss += 1.0 - cos;
        // ∂(1 − cos)/∂h = −(t / (‖h‖‖t‖) − cos · h / ‖h‖²)
        for (g, (&hv, &tv)) in grad.row_mut(r).iter_mut().zip(hr.iter().zip(tr)) {
            *g = -(tv / (hn * tn) - cos * hv / (hn * hn)) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Per-row cosine similarity.
pub fn row_cosines(h: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    if !h.same_shape(targets) {
        return Err(Error::shape("row_cosines", targets.cols(), h.cols()));
    }
    h.iter_rows()
        .zip(targets.iter_rows())
        .enumerate()
        .map(|(r, (a, b))| {
            let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if an == 0.0 || bn == 0.0 {
                return Err(Error::ZeroNorm(r));
            }
            Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (an * bn))
        })
        .collect()
}
