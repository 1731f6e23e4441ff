use rand::seq::SliceRandom;

use crate::data::augment::{augment, AugmentSpec};
use crate::data::dataset::{Batch, Dataset};
use crate::data::keyed_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The sample order one worker will consume in one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSchedule {
    pub epoch: usize,
    pub worker_id: usize,
    /// This worker's shard of the epoch permutation, in consumption order.
    pub permutation: Vec<u64>,
    pub batch_size: usize,
}

impl SampleSchedule {
    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    pub fn batch_ids(&self, batch_index: usize) -> Result<&[u64]> {
        if batch_index >= self.num_batches() {
            return Err(Error::invalid(format!(
                "batch {batch_index} out of range for {} batches",
                self.num_batches()
            )));
        }
        let start = batch_index * self.batch_size;
        let end = (start + self.batch_size).min(self.permutation.len());
        Ok(&self.permutation[start..end])
    }

    /// Id lists of the batches after `batch_index`, up to `depth` of them.
    pub fn lookahead(&self, batch_index: usize, depth: usize) -> Vec<Vec<u64>> {
        (batch_index + 1..self.num_batches())
            .take(depth)
            .filter_map(|i| self.batch_ids(i).ok().map(<[u64]>::to_vec))
            .collect()
    }
}

/// Fisher–Yates shuffle of all ids keyed by `(seed, epoch)`, dealt round-robin to
/// `num_workers` workers; worker `worker_id` gets positions `worker_id, worker_id + K, …`.
pub fn sample_epoch(
    dataset: &Dataset,
    seed: u64,
    epoch: usize,
    worker_id: usize,
    num_workers: usize,
    batch_size: usize,
) -> Result<SampleSchedule> {
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if num_workers < 1 || worker_id >= num_workers {
        return Err(Error::invalid(format!(
            "worker {worker_id} of {num_workers}"
        )));
    }
    let mut perm = dataset.sample_ids.clone();
    perm.shuffle(&mut keyed_rng(&[seed, epoch as u64, 0xe90c]));
    let permutation = perm
        .into_iter()
        .skip(worker_id)
        .step_by(num_workers)
        .collect();
    Ok(SampleSchedule {
        epoch,
        worker_id,
        permutation,
        batch_size,
    })
}

/// Gathers, augments and stacks batch `batch_index` of `schedule`.
pub fn next_batch(
    dataset: &Dataset,
    schedule: &SampleSchedule,
    batch_index: usize,
    aug: &AugmentSpec,
    seed: u64,
) -> Result<Batch> {
    let ids = schedule.batch_ids(batch_index)?;
    let samples = ids
        .iter()
        .map(|&id| dataset.sample(id).map(|s| augment(&s, id, aug, seed)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        inputs: Tensor::stack(&samples)?,
        labels: ids.iter().map(|&id| dataset.labels[id as usize]).collect(),
        sample_ids: ids.to_vec(),
    })
}
