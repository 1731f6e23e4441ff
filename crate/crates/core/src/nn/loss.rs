use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the logits:
/// `(softmax − one_hot) / b`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::invalid(format!(
            "logits must be [b, K], got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("labels", &[b], &[labels.len()]));
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let bt = T::from_usize_lossy(b);
    let mut grad = Vec::with_capacity(b * k);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += z.ln() - (row[label] - max);
        for (j, e) in exps.into_iter().enumerate() {
            let p = e / z;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) / bt);
        }
    }
    Ok((loss / bt, Tensor::new(vec![b, k], grad)?))
}
