//! Small reference architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::Layer;
use crate::nn::model::Model;
use crate::scalar::Scalar;

/// Module grouping used by [`toy_cnn`] when no patterns are configured.
pub fn toy_cnn_groups() -> Vec<(String, String)> {
    [
        ("block1", r"^(conv1|bn1|relu1|pool1)$"),
        ("block2", r"^(conv2|bn2|relu2|pool2)$"),
        ("fc", r"^(flatten|fc1|relu3)$"),
        ("head", r"^fc2$"),
    ]
    .into_iter()
    .map(|(n, p)| (n.to_string(), p.to_string()))
    .collect()
}

/// Layers of the toy CNN:
/// `conv(8)-relu-pool | conv(16)-relu-pool | flatten-dense(hidden)-relu | dense(classes)`,
/// optionally with batchnorm after each convolution.
pub fn toy_cnn_layers<T: Scalar>(
    input: &[usize],
    classes: usize,
    hidden: usize,
    batchnorm: bool,
    seed: u64,
) -> Result<Vec<Layer<T>>> {
    let &[c, h, w] = input else {
        return Err(Error::invalid(format!(
            "toy CNN input must be [c, h, w], got {input:?}"
        )));
    };
    if h < 4 || w < 4 {
        return Err(Error::invalid("toy CNN input needs h, w >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::conv2d("conv1", c, 8, 3, 1, &mut rng)];
    if batchnorm {
        layers.push(Layer::batchnorm("bn1", 8));
    }
    layers.push(Layer::relu("relu1"));
    layers.push(Layer::maxpool2d("pool1"));
    layers.push(Layer::conv2d("conv2", 8, 16, 3, 1, &mut rng));
    if batchnorm {
        layers.push(Layer::batchnorm("bn2", 16));
    }
    layers.push(Layer::relu("relu2"));
    layers.push(Layer::maxpool2d("pool2"));
    layers.push(Layer::flatten("flatten"));
    layers.push(Layer::dense(
        "fc1",
        16 * (h / 4) * (w / 4),
        hidden,
        &mut rng,
    ));
    layers.push(Layer::relu("relu3"));
    layers.push(Layer::dense("fc2", hidden, classes, &mut rng));
    Ok(layers)
}

pub fn toy_cnn<T: Scalar>(
    input: &[usize],
    classes: usize,
    batchnorm: bool,
    seed: u64,
) -> Result<Model<T>> {
    let layers = toy_cnn_layers(input, classes, 64, batchnorm, seed)?;
    Model::from_layers(input, layers, &toy_cnn_groups())
}

/// Layers of a ReLU MLP named `fc1, relu1, fc2, relu2, …, out`.
pub fn mlp_layers<T: Scalar>(
    inputs: usize,
    hidden: &[usize],
    classes: usize,
    seed: u64,
) -> Vec<Layer<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut prev = inputs;
    for (i, &width) in hidden.iter().enumerate() {
        layers.push(Layer::dense(&format!("fc{}", i + 1), prev, width, &mut rng));
        layers.push(Layer::relu(&format!("relu{}", i + 1)));
        prev = width;
    }
    layers.push(Layer::dense("out", prev, classes, &mut rng));
    layers
}

/// One module per hidden layer (`hidden1`, …) plus `head`.
pub fn mlp_groups(hidden_layers: usize) -> Vec<(String, String)> {
    let mut groups: Vec<(String, String)> = (1..=hidden_layers)
        .map(|i| (format!("hidden{i}"), format!("^(fc{i}|relu{i})$")))
        .collect();
    groups.push(("head".into(), "^out$".into()));
    groups
}

pub fn mlp<T: Scalar>(
    inputs: usize,
    hidden: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    Model::from_layers(
        &[inputs],
        mlp_layers(inputs, hidden, classes, seed),
        &mlp_groups(hidden.len()),
    )
}
