use rand::seq::SliceRandom;

use crate::data::keyed_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, …]` sample tensor.
    pub samples: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Stable ids, dense `0..N`.
    pub sample_ids: Vec<u64>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = samples.batch();
        if samples.rank() < 2 {
            return Err(Error::invalid("dataset samples must be [N, ...]"));
        }
        if labels.len() != n {
            return Err(Error::shape("dataset labels", &[n], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            labels,
            sample_ids: (0..n as u64).collect(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample(&self, id: u64) -> Result<Tensor<f32>> {
        let i = id as usize;
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "sample id {id} out of range for {} samples",
                self.len()
            )));
        }
        Tensor::new(self.sample_shape().to_vec(), self.samples.row(i).to_vec())
    }

    /// Rows `indices` as a new dataset with ids renumbered `0..len`.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let row = self.samples.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.samples.shape().to_vec();
        shape[0] = indices.len();
        Dataset::new(name, Tensor::new(shape, data)?, labels, self.classes)
    }

    /// Deterministic train/validation split; `fraction` of the samples go to validation.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "holdout fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut keyed_rng(&[seed, 0x5711_7000]));
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok((
            self.subset(format!("{}-train", self.name), &train)?,
            self.subset(format!("{}-val", self.name), &val)?,
        ))
    }
}
