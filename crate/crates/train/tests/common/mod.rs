#![allow(dead_code)]

use std::path::Path;

use thaw_train::TrainConfig;

/// A small blobs run writing into `out`. `extra` is appended to the TOML and
/// may override sections.
pub fn toml(out: &Path, extra: &str) -> String {
    format!(
        r#"seed = 3
out = "{}"

[model]
kind = "toy_cnn"
hidden = [16]

[data]
source = "blobs"
classes = 4
per_class = 40
shape = [1, 8, 8]
stddev = 0.3

[train]
epochs = 8
batch_size = 16

[lr]
base = 0.1
schedule = "constant"
{extra}"#,
        out.display()
    )
}

pub fn config(out: &Path, extra: &str) -> TrainConfig {
    TrainConfig::from_toml(&toml(out, extra)).unwrap()
}
