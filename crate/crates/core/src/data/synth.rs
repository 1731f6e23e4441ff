use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::dataset::Dataset;
use crate::data::keyed_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Gaussian clusters around random unit-sphere centers.
    Blobs,
    /// Interleaved 2-D spiral arms.
    Spirals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub classes: usize,
    pub per_class: usize,
    /// Per-sample shape; blobs live in `product(shape)` dimensions, spirals need `[2]`.
    pub shape: Vec<usize>,
    pub stddev: f64,
    pub seed: u64,
}

/// Samples are interleaved by class (`label = i mod K`), so any prefix is near balanced.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class < 1 {
        return Err(Error::invalid(
            "synthetic data needs classes >= 2 and per_class >= 1",
        ));
    }
    if !(spec.stddev >= 0.0) {
        return Err(Error::invalid("stddev must be non-negative"));
    }
    let dim: usize = spec.shape.iter().product();
    let n = spec.classes * spec.per_class;
    let noise = Normal::new(0.0, spec.stddev).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        SynthKind::Blobs => {
            let mut rng = keyed_rng(&[spec.seed, 1]);
            let centers: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                        .max(f64::MIN_POSITIVE);
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect();
            let mut rng = keyed_rng(&[spec.seed, 2]);
            for i in 0..n {
                let k = i % spec.classes;
                data.extend(
                    centers[k]
                        .iter()
                        .map(|&c| (c + noise.sample(&mut rng)) as f32),
                );
                labels.push(k);
            }
        }
        SynthKind::Spirals => {
            if dim != 2 {
                return Err(Error::invalid("spirals are two-dimensional; use shape [2]"));
            }
            let mut rng = keyed_rng(&[spec.seed, 3]);
            for i in 0..n {
                let k = i % spec.classes;
                let t: f64 = rng.random_range(0.05..1.0);
                let angle = 2.0 * std::f64::consts::PI * (1.5 * t + k as f64 / spec.classes as f64);
                data.push((t * angle.cos() + noise.sample(&mut rng)) as f32);
                data.push((t * angle.sin() + noise.sample(&mut rng)) as f32);
                labels.push(k);
            }
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.shape);
    let name = match spec.kind {
        SynthKind::Blobs => "blobs",
        SynthKind::Spirals => "spirals",
    };
    Dataset::new(name, Tensor::new(shape, data)?, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(stddev: f64) -> SynthSpec {
        SynthSpec {
            kind: SynthKind::Blobs,
            classes: 2,
            per_class: 100,
            shape: vec![1, 4, 4],
            stddev,
            seed: 11,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_dataset(&blobs(0.3)).unwrap(),
            synth_dataset(&blobs(0.3)).unwrap()
        );
    }

    #[test]
    fn balanced_counts() {
        let ds = synth_dataset(&blobs(0.3)).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 100);
        assert_eq!(ds.samples.shape(), &[200, 1, 4, 4]);
    }

    #[test]
    fn zero_stddev_hits_centers() {
        let ds = synth_dataset(&blobs(0.0)).unwrap();
        for i in 2..ds.len() {
            assert_eq!(ds.samples.row(i), ds.samples.row(i % 2));
        }
        let norm: f32 = ds.samples.row(0).iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn spirals_are_2d() {
        let mut spec = blobs(0.0);
        spec.kind = SynthKind::Spirals;
        assert!(synth_dataset(&spec).is_err());
        spec.shape = vec![2];
        assert_eq!(synth_dataset(&spec).unwrap().samples.shape(), &[200, 2]);
    }
}
