//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]`, `[lr]`,
//! `[controller]`, `[cache]` and `[reference]` sections.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thaw_core::data::{AugmentSpec, SynthKind, SynthSpec};
use thaw_core::nn::{zoo, LrSchedule, Model};
use thaw_core::quant::ReferencePrecision;

use crate::TrainError;

/// Iterations per module per window in the interval guideline: the freezing of
/// all modules should take about half of training, with 1.75 windows per module.
const WINDOWS_PER_MODULE: f64 = 1.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ToyCnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    /// `(module name, layer-name regex)` in model order; `None` uses the architecture default.
    pub modules: Option<Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub val_fraction: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    /// Evaluation interval `n`; derived from the run length when absent.
    pub eval_interval: Option<usize>,
    pub window: usize,
    pub tolerance_coeff: f64,
    pub bootstrap_rate: f64,
    pub lr_unfreeze_factor: f64,
    /// Iterations between an evaluation and the boundary its decision is applied at; defaults to `n`.
    pub decision_lag: Option<usize>,
    /// Wait for overdue decisions instead of applying them late.
    pub strict_decisions: bool,
    pub stall_ms: u64,
    /// Defaults to `4n`.
    pub pairing_horizon: Option<u64>,
    pub queue_capacity: usize,
    pub load_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSettings {
    pub enabled: bool,
    /// Defaults to `<out>/cache`.
    pub dir: Option<PathBuf>,
    pub threshold: f64,
    pub prefetch_depth: usize,
    pub disk_limit_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSettings {
    pub precision: ReferencePrecision,
    /// Evaluations between reference refreshes; defaults to the window `W`.
    pub update_period: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze: bool,
    pub lr: LrSchedule,
    pub controller: ControllerSettings,
    pub cache: CacheSettings,
    pub reference: ReferenceSettings,
    /// The text this config was parsed from.
    pub source_text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<i64>,
    workers: Option<i64>,
    out: Option<PathBuf>,
    model: RawModel,
    data: RawData,
    train: RawTrain,
    lr: RawLr,
    #[serde(default)]
    controller: RawController,
    #[serde(default)]
    cache: RawCache,
    #[serde(default)]
    reference: RawReference,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    name: String,
    pattern: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    hidden: Option<Vec<i64>>,
    #[serde(default)]
    batchnorm: bool,
    modules: Option<Vec<RawModule>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugment {
    hflip: Option<f64>,
    pad_crop: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: String,
    classes: Option<i64>,
    per_class: Option<i64>,
    shape: Option<Vec<i64>>,
    stddev: Option<f64>,
    seed: Option<i64>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    val_fraction: Option<f64>,
    augment: Option<RawAugment>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: i64,
    batch_size: i64,
    #[serde(default = "yes")]
    freeze: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLr {
    base: f64,
    schedule: Option<String>,
    decay: Option<f64>,
    milestones: Option<Vec<i64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    n: Option<i64>,
    window: Option<i64>,
    tolerance_coeff: Option<f64>,
    bootstrap_rate: Option<f64>,
    lr_unfreeze_factor: Option<f64>,
    decision_lag: Option<i64>,
    strict_decisions: Option<bool>,
    stall_ms: Option<i64>,
    pairing_horizon: Option<i64>,
    queue_capacity: Option<i64>,
    load_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCache {
    enabled: Option<bool>,
    dir: Option<PathBuf>,
    threshold: Option<f64>,
    prefetch_depth: Option<i64>,
    disk_limit_mb: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    precision: Option<String>,
    update_period: Option<i64>,
}

fn bad(key: &str, why: impl std::fmt::Display) -> TrainError {
    TrainError::Config(format!("{key}: {why}"))
}

fn positive(key: &str, v: i64) -> Result<usize, TrainError> {
    if v <= 0 {
        return Err(bad(key, format!("must be positive, got {v}")));
    }
    Ok(v as usize)
}

fn non_negative(key: &str, v: i64) -> Result<usize, TrainError> {
    if v < 0 {
        return Err(bad(key, format!("must be non-negative, got {v}")));
    }
    Ok(v as usize)
}

fn positive_f(key: &str, v: f64) -> Result<f64, TrainError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(bad(key, format!("must be positive, got {v}")));
    }
    Ok(v)
}

fn dims(key: &str, v: &[i64]) -> Result<Vec<usize>, TrainError> {
    if v.is_empty() {
        return Err(bad(key, "must not be empty"));
    }
    v.iter().map(|&d| positive(key, d)).collect()
}

/// `n ≈ total / (2W) / modules / 1.75`, at least 1.
pub fn auto_eval_interval(total_iterations: usize, modules: usize, window: usize) -> usize {
    let n = total_iterations as f64
        / (2.0 * window as f64)
        / modules.max(1) as f64
        / WINDOWS_PER_MODULE;
    (n.round() as usize).max(1)
}

/// First 8 bytes of the SHA-256 of the config text.
pub fn config_hash(text: &str) -> [u8; 8] {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub fn parse_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_toml(&text)
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        let seed = non_negative("seed", raw.seed.unwrap_or(0))? as u64;
        let workers = positive("workers", raw.workers.unwrap_or(1))?;

        let m = raw.model;
        let kind = match m.kind.as_str() {
            "toy_cnn" => ModelKind::ToyCnn,
            "mlp" => ModelKind::Mlp,
            other => return Err(bad("model.kind", format!("unknown model {other:?}"))),
        };
        let hidden = match m.hidden {
            Some(h) => dims("model.hidden", &h)?,
            None if kind == ModelKind::ToyCnn => vec![64],
            None => vec![64, 32],
        };
        let model = ModelSpec {
            kind,
            hidden,
            batchnorm: m.batchnorm,
            modules: m
                .modules
                .map(|ms| ms.into_iter().map(|r| (r.name, r.pattern)).collect()),
        };

        let d = raw.data;
        let data_seed = match d.seed {
            Some(s) => non_negative("data.seed", s)? as u64,
            None => seed,
        };
        let source = match d.source.as_str() {
            "blobs" | "spirals" => {
                let kind = if d.source == "blobs" {
                    SynthKind::Blobs
                } else {
                    SynthKind::Spirals
                };
                let default_shape = if kind == SynthKind::Blobs {
                    vec![1, 8, 8]
                } else {
                    vec![2]
                };
                let classes = positive("data.classes", d.classes.unwrap_or(4))?;
                if classes < 2 {
                    return Err(bad("data.classes", "must be at least 2"));
                }
                DataSource::Synth(SynthSpec {
                    kind,
                    classes,
                    per_class: positive("data.per_class", d.per_class.unwrap_or(100))?,
                    shape: match d.shape {
                        Some(s) => dims("data.shape", &s)?,
                        None => default_shape,
                    },
                    stddev: match d.stddev {
                        Some(s) if s < 0.0 => {
                            return Err(bad("data.stddev", "must be non-negative"))
                        }
                        Some(s) => s,
                        None => 0.3,
                    },
                    seed: data_seed,
                })
            }
            "idx" => DataSource::Idx {
                images: d
                    .images
                    .ok_or_else(|| bad("data.images", "required for idx data"))?,
                labels: d
                    .labels
                    .ok_or_else(|| bad("data.labels", "required for idx data"))?,
            },
            other => return Err(bad("data.source", format!("unknown source {other:?}"))),
        };
        let val_fraction = d.val_fraction.unwrap_or(0.2);
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(bad("data.val_fraction", "must be in [0, 1)"));
        }
        let augment = match d.augment {
            Some(a) => AugmentSpec {
                hflip: match a.hflip {
                    Some(p) if !(0.0..=1.0).contains(&p) => {
                        return Err(bad("data.augment.hflip", "must be a probability"))
                    }
                    p => p,
                },
                pad_crop: a
                    .pad_crop
                    .map(|k| non_negative("data.augment.pad_crop", k))
                    .transpose()?,
            },
            None => AugmentSpec::default(),
        };

        let epochs = positive("train.epochs", raw.train.epochs)?;
        let batch_size = positive("train.batch_size", raw.train.batch_size)?;

        let base = positive_f("lr.base", raw.lr.base)?;
        let lr = match raw.lr.schedule.as_deref().unwrap_or("step") {
            "constant" => LrSchedule::constant(base),
            "step" => {
                let milestones = raw
                    .lr
                    .milestones
                    .unwrap_or_default()
                    .iter()
                    .map(|&m| non_negative("lr.milestones", m))
                    .collect::<Result<Vec<_>, _>>()?;
                LrSchedule::step_decay(base, raw.lr.decay.unwrap_or(0.1), milestones)
            }
            other => return Err(bad("lr.schedule", format!("unknown schedule {other:?}"))),
        }
        .map_err(|e| bad("lr", e))?;

        let c = raw.controller;
        let controller = ControllerSettings {
            eval_interval: c.n.map(|n| positive("controller.n", n)).transpose()?,
            window: positive("controller.window", c.window.unwrap_or(10))?,
            tolerance_coeff: positive_f(
                "controller.tolerance_coeff",
                c.tolerance_coeff.unwrap_or(0.2),
            )?,
            bootstrap_rate: positive_f(
                "controller.bootstrap_rate",
                c.bootstrap_rate.unwrap_or(0.10),
            )?,
            lr_unfreeze_factor: positive_f(
                "controller.lr_unfreeze_factor",
                c.lr_unfreeze_factor.unwrap_or(10.0),
            )?,
            decision_lag: c
                .decision_lag
                .map(|l| positive("controller.decision_lag", l))
                .transpose()?,
            strict_decisions: c.strict_decisions.unwrap_or(false),
            stall_ms: non_negative("controller.stall_ms", c.stall_ms.unwrap_or(0))? as u64,
            pairing_horizon: c
                .pairing_horizon
                .map(|h| positive("controller.pairing_horizon", h).map(|h| h as u64))
                .transpose()?,
            queue_capacity: positive("controller.queue_capacity", c.queue_capacity.unwrap_or(8))?,
            load_threshold: c
                .load_threshold
                .map(|t| positive_f("controller.load_threshold", t))
                .transpose()?,
        };
        if controller.tolerance_coeff >= 1.0 {
            return Err(bad("controller.tolerance_coeff", "must be below 1"));
        }
        if controller.lr_unfreeze_factor <= 1.0 {
            return Err(bad("controller.lr_unfreeze_factor", "must exceed 1"));
        }

        let k = raw.cache;
        let threshold = k.threshold.unwrap_or(0.10);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(bad("cache.threshold", "must be in [0, 1]"));
        }
        let cache = CacheSettings {
            enabled: k.enabled.unwrap_or(true),
            dir: k.dir,
            threshold,
            prefetch_depth: non_negative("cache.prefetch_depth", k.prefetch_depth.unwrap_or(2))?,
            disk_limit_bytes: k
                .disk_limit_mb
                .map(|mb| {
                    positive_f("cache.disk_limit_mb", mb).map(|mb| (mb * 1024.0 * 1024.0) as u64)
                })
                .transpose()?,
        };

        let r = raw.reference;
        let reference = ReferenceSettings {
            precision: match r.precision.as_deref().unwrap_or("int8") {
                "int8" => ReferencePrecision::Int8,
                "float32" => ReferencePrecision::Float32,
                other => {
                    return Err(bad(
                        "reference.precision",
                        format!("unknown precision {other:?}"),
                    ))
                }
            },
            update_period: r
                .update_period
                .map(|p| positive("reference.update_period", p))
                .transpose()?,
        };

        Ok(TrainConfig {
            seed,
            workers,
            out: raw.out.unwrap_or_else(|| PathBuf::from("runs/latest")),
            model,
            data: DataSpec {
                source,
                val_fraction,
                augment,
                seed: data_seed,
            },
            epochs,
            batch_size,
            freeze: raw.train.freeze,
            lr,
            controller,
            cache,
            reference,
            source_text: text.to_string(),
        })
    }

    pub fn hash(&self) -> [u8; 8] {
        config_hash(&self.source_text)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache
            .dir
            .clone()
            .unwrap_or_else(|| self.out.join("cache"))
    }

    /// `n` for a run of `total_iterations` over a model with `modules` modules.
    pub fn eval_interval(&self, total_iterations: usize, modules: usize) -> usize {
        self.controller.eval_interval.unwrap_or_else(|| {
            auto_eval_interval(total_iterations, modules, self.controller.window)
        })
    }

    pub fn module_patterns(&self) -> Vec<(String, String)> {
        match (&self.model.modules, self.model.kind) {
            (Some(m), _) => m.clone(),
            (None, ModelKind::ToyCnn) => zoo::toy_cnn_groups(),
            (None, ModelKind::Mlp) => zoo::mlp_groups(self.model.hidden.len()),
        }
    }

    /// Builds the configured architecture for samples of shape `input`.
    pub fn build_model(&self, input: &[usize], classes: usize) -> Result<Model<f32>, TrainError> {
        let spec = &self.model;
        let layers = match spec.kind {
            ModelKind::ToyCnn => {
                zoo::toy_cnn_layers(input, classes, spec.hidden[0], spec.batchnorm, self.seed)?
            }
            ModelKind::Mlp => {
                let inputs = input.iter().product();
                zoo::mlp_layers(inputs, &spec.hidden, classes, self.seed)
            }
        };
        let model_input = match spec.kind {
            ModelKind::ToyCnn => input.to_vec(),
            ModelKind::Mlp => vec![input.iter().product()],
        };
        Ok(Model::from_layers(
            &model_input,
            layers,
            &self.module_patterns(),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kind = "toy_cnn"
[data]
source = "blobs"
[train]
epochs = 2
batch_size = 16
[lr]
base = 0.05
"#;

    #[test]
    fn defaults_follow_the_guideline() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.controller.window, 10);
        assert_eq!(c.controller.tolerance_coeff, 0.2);
        assert_eq!(c.controller.bootstrap_rate, 0.10);
        assert_eq!(c.controller.eval_interval, None);
        assert_eq!(c.controller.queue_capacity, 8);
        assert!(c.freeze && c.cache.enabled);
    }

    #[test]
    fn auto_interval_matches_the_worked_example() {
        let n = auto_eval_interval(78_000, 7, 10);
        assert_eq!(n, 318);
        assert!((n as f64 - 300.0).abs() <= 30.0);
    }

    #[test]
    fn explicit_n_overrides_auto() {
        let text = format!("{MINIMAL}\n[controller]\nn = 7\n");
        let c = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(c.eval_interval(78_000, 7), 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("[train]", "[train]\nfoo = 1");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn missing_and_non_positive_keys_are_named() {
        let err = TrainConfig::from_toml(&MINIMAL.replace("epochs = 2\n", ""))
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochs"), "{err}");
        let err = TrainConfig::from_toml(&MINIMAL.replace("batch_size = 16", "batch_size = 0"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.batch_size"), "{err}");
        let err = TrainConfig::from_toml(&MINIMAL.replace("base = 0.05", "base = -1.0"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("lr.base"), "{err}");
    }

    #[test]
    fn hash_depends_on_text() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("b"));
    }

    #[test]
    fn builds_toy_cnn_with_four_modules() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        let m = c.build_model(&[1, 8, 8], 4).unwrap();
        assert_eq!(m.num_modules(), 4);
    }
}
