use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `(batch, classes)` matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", logits.shape(), &[0, 0]));
    }
    let k = logits.dim(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (batch, k) = (logits.dim(0), logits.dim(1));
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.data_mut()[b * k + label] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= batch as f64);
    Ok((loss / batch as f64, grad))
}

/// Mean squared error over all elements and its gradient `2 (pred - target) / N`.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l2_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
