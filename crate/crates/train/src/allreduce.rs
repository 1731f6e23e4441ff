use thaw_core::Tensor;

use crate::TrainError;

/// Ring all-reduce traffic per worker as a multiple of the payload: `2(K−1)/K`.
pub fn ring_factor(workers: usize) -> f64 {
    if workers == 0 {
        return 0.0;
    }
    2.0 * (workers as f64 - 1.0) / workers as f64
}

/// Bytes one worker sends to all-reduce `active_params` f32 gradients.
pub fn allreduce_bytes(active_params: usize, workers: usize) -> f64 {
    4.0 * active_params as f64 * ring_factor(workers)
}

/// Elementwise mean of each gradient tensor across workers, accumulated in
/// `f64` in worker order. Only the active modules' gradients are passed in,
/// so frozen parameters cost no traffic.
pub fn allreduce_grads(
    worker_grads: &[Vec<Tensor<f32>>],
) -> Result<(Vec<Tensor<f32>>, f64), TrainError> {
    let Some(first) = worker_grads.first() else {
        return Err(TrainError::Runtime("all-reduce with no workers".into()));
    };
    let k = worker_grads.len();
    for (w, grads) in worker_grads.iter().enumerate() {
        if grads.len() != first.len() {
            return Err(TrainError::Runtime(format!(
                "worker {w} sent {} gradients, worker 0 sent {}",
                grads.len(),
                first.len()
            )));
        }
        for (i, (g, g0)) in grads.iter().zip(first).enumerate() {
            if g.shape() != g0.shape() {
                return Err(TrainError::Runtime(format!(
                    "gradient {i} of worker {w} has shape {:?}, worker 0 has {:?}",
                    g.shape(),
                    g0.shape()
                )));
            }
        }
    }
    let mut active = 0;
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let n = first[i].len();
        active += n;
        let mut acc = vec![0f64; n];
        for grads in worker_grads {
            for (a, &g) in acc.iter_mut().zip(grads[i].data()) {
                *a += g as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / k as f64) as f32).collect();
        out.push(Tensor::new(first[i].shape().to_vec(), data)?);
    }
    Ok((out, allreduce_bytes(active, k)))
}
