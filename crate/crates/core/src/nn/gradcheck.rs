//! Central-difference checks of the analytic backward passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, Mode};
use crate::nn::loss::softmax_cross_entropy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHECK_SEED: u64 = 0x5eed;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        return (a - b).abs();
    }
    (a - b).abs() / denom
}

/// Distinct values spaced 0.1 apart and at least 0.05 away from zero, so relu
/// kinks and maxpool ties are never within a perturbation of any input.
fn kink_free_input<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let half = n as f64 / 2.0;
    let data = order
        .into_iter()
        .map(|i| T::lit((i as f64 - half + 0.5) * 0.1))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("input shape")
}

fn default_input_shape<T: Scalar>(layer: &Layer<T>) -> Vec<usize> {
    use crate::nn::layer::Op;
    match layer.op() {
        Op::Dense { weight, .. } => vec![3, weight.value().shape()[0]],
        Op::Conv2d { weight, .. } => vec![2, weight.value().shape()[1], 5, 5],
        Op::BatchNorm { gamma, .. } => vec![4, gamma.value().len(), 3, 3],
        Op::Relu | Op::MaxPool2d | Op::Flatten => vec![2, 2, 4, 4],
    }
}

/// Compares analytic input and parameter gradients of `layer` with central
/// differences of `L = Σ y·r` for a fixed random `r`. Returns the worst
/// relative error. The layer runs in train mode.
pub fn finite_diff_check<T: Scalar>(layer: &mut Layer<T>, eps: f64) -> Result<f64> {
    let shape = default_input_shape(layer);
    finite_diff_check_with_input(layer, &shape, eps)
}

pub fn finite_diff_check_with_input<T: Scalar>(
    layer: &mut Layer<T>,
    input_shape: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!(
            "eps must be in [1e-5, 1e-2], got {eps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let x = kink_free_input::<T>(input_shape, &mut rng);
    let out_shape = layer.output_shape(input_shape)?;
    let n_out: usize = out_shape.iter().product();
    let r = Tensor::new(
        out_shape,
        (0..n_out)
            .map(|_| T::lit(rng.random_range(-1.0..1.0)))
            .collect(),
    )?;
    let loss = |layer: &mut Layer<T>, x: &Tensor<T>| -> Result<f64> {
        let y = layer.forward(x, Mode::Train)?;
        Ok(y.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (*a * *b).as_f64())
            .sum())
    };

    layer.forward(&x, Mode::Train)?;
    let dx = layer
        .backward(&r, true)?
        .ok_or_else(|| Error::invalid("layer returned no input gradient"))?;
    let analytic_params: Vec<Tensor<T>> = layer
        .parameters()
        .iter()
        .map(|p| {
            p.grad()
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()))
        })
        .collect();

    let h = T::lit(eps);
    let two_h = 2.0 * eps;
    let mut worst = 0.0f64;

    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let lp = loss(layer, &xp)?;
        xp.data_mut()[i] = orig - h;
        let lm = loss(layer, &xp)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(dx.data()[i].as_f64(), (lp - lm) / two_h));
    }

    for (pi, analytic) in analytic_params.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = layer.parameters()[pi].value().data()[i];
            layer.parameters_mut()[pi].value_mut().data_mut()[i] = orig + h;
            let lp = loss(layer, &x)?;
            layer.parameters_mut()[pi].value_mut().data_mut()[i] = orig - h;
            let lm = loss(layer, &x)?;
            layer.parameters_mut()[pi].value_mut().data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i].as_f64(), (lp - lm) / two_h));
        }
    }
    layer.clear_saved();
    Ok(worst)
}

/// Central-difference check of the softmax cross-entropy gradient.
pub fn finite_diff_check_loss<T: Scalar>(batch: usize, classes: usize, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let logits = Tensor::<T>::new(
        vec![batch, classes],
        (0..batch * classes)
            .map(|_| T::lit(rng.random_range(-2.0..2.0)))
            .collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    let h = T::lit(eps);
    let mut worst = 0.0f64;
    let mut z = logits.clone();
    for i in 0..z.len() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + h;
        let (lp, _) = softmax_cross_entropy(&z, &labels)?;
        z.data_mut()[i] = orig - h;
        let (lm, _) = softmax_cross_entropy(&z, &labels)?;
        z.data_mut()[i] = orig;
        let numeric = (lp.as_f64() - lm.as_f64()) / (2.0 * eps);
        worst = worst.max(rel_err(grad.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}
