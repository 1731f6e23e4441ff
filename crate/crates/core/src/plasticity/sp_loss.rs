//! Similarity-preserving distance between two activation tensors.
//!
//! Both tensors are flattened to `b×d`, turned into `b×b` Gram matrices
//! `G̃ = A·Aᵀ`, and each row of `G̃` is L2-normalized. The loss is
//! `‖G_T − G_R‖²_F / b²`. It compares how a batch relates to itself, so it is
//! invariant to a uniform positive rescaling and to any orthogonal transform
//! of the feature axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-normalized batch Gram matrix, `b×b` row-major.
pub fn normalized_gram<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let b = a.batch();
    let d = a.row_len();
    let x = a.data();
    let mut g = vec![T::zero(); b * b];
    for i in 0..b {
        let ri = &x[i * d..(i + 1) * d];
        for j in i..b {
            let rj = &x[j * d..(j + 1) * d];
            let dot: T = ri.iter().zip(rj).map(|(&p, &q)| p * q).sum();
            g[i * b + j] = dot;
            g[j * b + i] = dot;
        }
    }
    for row in g.chunks_mut(b) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    g
}

pub fn sp_loss<T: Scalar>(a_t: &Tensor<T>, a_r: &Tensor<T>) -> Result<T> {
    if a_t.shape() != a_r.shape() {
        return Err(Error::shape("sp_loss", a_t.shape(), a_r.shape()));
    }
    if a_t.rank() == 0 || a_t.batch() == 0 {
        return Err(Error::invalid("sp_loss needs a non-empty batch"));
    }
    let b = a_t.batch();
    let gt = normalized_gram(a_t);
    let gr = normalized_gram(a_r);
    let sq: T = gt.iter().zip(&gr).map(|(&p, &q)| (p - q) * (p - q)).sum();
    Ok(sq / T::from_usize_lossy(b * b))
}
