//! Softmax cross-entropy loss and small classifier helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, with the
/// gradient at the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 {
        return Err(Error::shape("softmax_cross_entropy", "[batch, classes]", format!("{:?}", logits.shape)));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    if b == 0 || labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} logit rows vs {} labels",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&logits.shape);
    for (bi, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!("label {label} for {c} classes")));
        }
        let row = &logits.data[bi * c..(bi + 1) * c];
        // Max-shifted for overflow safety.
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        loss += -(row[label] - m - z.ln());
        let g_row = &mut grad.data[bi * c..(bi + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            g_row[j] = (p - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok((loss, grad))
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.shape.len() != 2 {
        return Err(Error::shape("softmax_rows", "[batch, classes]", format!("{:?}", logits.shape)));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    let mut out = Tensor::zeros(&logits.shape);
    for bi in 0..b {
        let row = &logits.data[bi * c..(bi + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            out.data[bi * c + j] = (v - m).exp() / z;
        }
    }
    Ok(out)
}

/// Index of the largest logit in row `bi`; ties go to the lower index.
pub fn argmax_row(logits: &Tensor, bi: usize) -> usize {
    let c = logits.shape[1];
    let row = &logits.data[bi * c..(bi + 1) * c];
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
