mod common;

use thaw_core::data::Dataset;
use thaw_core::nn::{toy_cnn, Mode};
use thaw_core::{Model32, Tensor};
use thaw_train::metrics::{read_epochs, read_metrics, METRICS_HEADER};
use thaw_train::{evaluate, iterations_per_epoch, train, EventKind};

fn val_set(classes: usize, n: usize) -> Dataset {
    let samples = Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64).map(|i| ((i * 37) % 11) as f32 / 11.0).collect(),
    )
    .unwrap();
    Dataset::new(
        "val",
        samples,
        (0..n).map(|i| i % classes).collect(),
        classes,
    )
    .unwrap()
}

#[test]
fn constant_predictor_scores_one_over_k() {
    // Zeroing every weight leaves the bias-free logits tied, so argmax picks class 0.
    let mut m: Model32 = toy_cnn(&[1, 8, 8], 4, false, 1).unwrap();
    for p in m.parameters_mut() {
        let shape = p.value().shape().to_vec();
        p.set_value(Tensor::zeros(&shape)).unwrap();
    }
    let acc = evaluate(&m, &val_set(4, 400)).unwrap();
    assert_eq!(acc, 0.25);
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), "");
    let (_, val) = thaw_train::prepare_data(&cfg).unwrap();
    let m = cfg.build_model(val.sample_shape(), val.classes).unwrap();
    let acc = evaluate(&m, &val).unwrap();
    assert!((acc - 0.25).abs() <= 0.20, "accuracy {acc}");
    let mut mm = m.snapshot();
    assert_eq!(
        mm.forward(&val.samples.slice_rows(0, 2).unwrap(), Mode::Inference)
            .unwrap()
            .shape(),
        &[2, 4]
    );
}

#[test]
fn training_learns_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), "");
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.metrics.len(), 8 * iterations_per_epoch(128, 1, 16));
    let acc = outcome.final_val_accuracy().unwrap();
    assert!(acc > 0.5, "accuracy {acc}");
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(
        read_metrics(&dir.path().join("metrics.csv")).unwrap().len(),
        outcome.metrics.len()
    );
    assert_eq!(
        read_epochs(&dir.path().join("epochs.csv")).unwrap().len(),
        8
    );
    let log = std::fs::read_to_string(dir.path().join("decisions.log")).unwrap();
    assert_eq!(log.lines().count(), outcome.events.len());
}

#[test]
fn no_freeze_keeps_everything_trainable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path(), "\n[controller]\nn = 1\nwindow = 2\n");
    cfg.freeze = false;
    let outcome = train(&cfg).unwrap();
    assert!(outcome
        .metrics
        .iter()
        .all(|r| r.frontmost_active == 0 && r.frozen_param_fraction == 0.0));
    assert!(outcome.events.iter().all(|e| e.kind == EventKind::Stage));
    assert_eq!(outcome.runtime.evaluations, 0);
}

#[test]
fn freezing_cuts_backward_flops() {
    let extra =
        "\n[controller]\nn = 1\nwindow = 2\nstrict_decisions = true\ntolerance_coeff = 0.9\n";
    let dir = tempfile::tempdir().unwrap();
    let frozen = train(&common::config(&dir.path().join("f"), extra)).unwrap();
    let mut base_cfg = common::config(&dir.path().join("b"), extra);
    base_cfg.freeze = false;
    let base = train(&base_cfg).unwrap();
    assert!(frozen.count(EventKind::Freeze) >= 1);
    let bwd = |o: &thaw_train::TrainOutcome| o.metrics.iter().map(|r| r.bwd_flops).sum::<u64>();
    assert!(bwd(&frozen) < bwd(&base));
    // Loss curve agrees with the baseline up to the first freeze.
    let first = frozen
        .events
        .iter()
        .find(|e| e.kind == EventKind::Freeze)
        .unwrap()
        .iteration as usize;
    for i in 0..first {
        assert_eq!(
            frozen.metrics[i].loss, base.metrics[i].loss,
            "iteration {i}"
        );
    }
}

#[test]
fn frozen_prefix_is_recorded_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&common::config(
        dir.path(),
        "\n[controller]\nn = 1\nwindow = 2\nstrict_decisions = true\ntolerance_coeff = 0.9\n",
    ))
    .unwrap();
    let total = outcome.model.param_count() as f64;
    for r in &outcome.metrics {
        let frozen: usize = outcome.model.modules()[..r.frontmost_active]
            .iter()
            .map(|m| m.param_count())
            .sum();
        assert_eq!(r.frozen_param_fraction, frozen as f64 / total);
    }
    assert_eq!(
        outcome.model.frontmost_active(),
        outcome.metrics.last().unwrap().frontmost_active
    );
}
