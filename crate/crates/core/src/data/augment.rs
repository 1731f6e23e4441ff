use rand::Rng;

use crate::data::keyed_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentSpec {
    /// Horizontal flip probability.
    pub hflip: Option<f64>,
    /// Zero-pad by `k` on each side, then crop back at a random offset.
    pub pad_crop: Option<usize>,
}

impl AugmentSpec {
    pub fn is_empty(&self) -> bool {
        self.hflip.is_none() && self.pad_crop.is_none()
    }
}

/// Augments a `[c, h, w]` (or `[h, w]`) sample. Randomness comes only from
/// `(seed, sample_id)`, so a sample is transformed identically in every epoch.
/// Lower-rank samples are returned unchanged.
pub fn augment(sample: &Tensor<f32>, sample_id: u64, spec: &AugmentSpec, seed: u64) -> Tensor<f32> {
    if spec.is_empty() || sample.rank() < 2 {
        return sample.clone();
    }
    let shape = sample.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = sample.len() / (h * w);
    let mut rng = keyed_rng(&[seed, sample_id, 0xa06]);
    let flip = spec.hflip.is_some_and(|p| rng.random::<f64>() < p);
    let (dy, dx) = match spec.pad_crop {
        Some(k) if k > 0 => (rng.random_range(0..=2 * k), rng.random_range(0..=2 * k)),
        _ => (0, 0),
    };
    let pad = spec.pad_crop.unwrap_or(0) as isize;
    let src = sample.data();
    let mut out = vec![0.0f32; sample.len()];
    for p in 0..planes {
        for i in 0..h {
            let si = i as isize + dy as isize - pad;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = jj as isize + dx as isize - pad;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                out[(p * h + i) * w + j] = src[(p * h + si as usize) * w + sj as usize];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Tensor<f32> {
        Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn empty_spec_is_identity() {
        let t = fixture();
        assert_eq!(augment(&t, 5, &AugmentSpec::default(), 1), t);
    }

    #[test]
    fn certain_flip_reverses_columns() {
        let spec = AugmentSpec {
            hflip: Some(1.0),
            pad_crop: None,
        };
        let out = augment(&fixture(), 5, &spec, 1);
        assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn same_sample_same_output() {
        let spec = AugmentSpec {
            hflip: Some(0.5),
            pad_crop: Some(1),
        };
        let t = Tensor::from_f64(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let first = augment(&t, 42, &spec, 7);
        for _ in 0..5 {
            assert_eq!(augment(&t, 42, &spec, 7), first);
        }
    }
}
