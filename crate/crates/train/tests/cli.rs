mod common;

use std::process::Command;

use thaw_train::metrics::{EpochRow, MetricsRow, MetricsSink};
use thaw_train::report;

fn thaw(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_thaw"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn row(iteration: u64, frontmost: usize, fwd: u64, bwd: u64, bytes: f64) -> MetricsRow {
    MetricsRow {
        iteration,
        epoch: (iteration / 2) as u32,
        loss: 1.0,
        lr: 0.1,
        frontmost_active: frontmost,
        frozen_param_fraction: frontmost as f64 * 0.25,
        fwd_flops: fwd,
        bwd_flops: bwd,
        bytes_allreduced: bytes,
        cache_hits: 0,
        wall_ms: 1.0,
    }
}

fn write_run(dir: &std::path::Path, rows: &[MetricsRow], acc: f64) {
    let mut sink = MetricsSink::create(dir).unwrap();
    for r in rows {
        sink.write_metrics_row(r).unwrap();
    }
    sink.write_epoch(&EpochRow {
        epoch: 0,
        val_accuracy: acc,
    })
    .unwrap();
    sink.flush().unwrap();
}

#[test]
fn report_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (run, base) = (dir.path().join("run"), dir.path().join("base"));
    write_run(
        &base,
        &[
            row(0, 0, 100, 200, 40.0),
            row(1, 0, 100, 200, 40.0),
            row(2, 0, 100, 200, 40.0),
            row(3, 0, 100, 200, 40.0),
        ],
        0.9,
    );
    write_run(
        &run,
        &[
            row(0, 0, 100, 200, 40.0),
            row(1, 0, 100, 200, 40.0),
            row(2, 1, 100, 100, 20.0),
            row(3, 2, 50, 100, 20.0),
        ],
        0.88,
    );
    let r = report(&run.join("metrics.csv"), Some(&base.join("metrics.csv"))).unwrap();
    assert_eq!(r.totals.fwd_flops, 350);
    assert_eq!(r.fwd_saved(), Some(1.0 - 350.0 / 400.0));
    assert_eq!(r.bwd_saved(), Some(1.0 - 600.0 / 800.0));
    assert_eq!(r.bytes_saved(), Some(0.25));
    assert_eq!(r.final_val_accuracy, Some(0.88));
    assert_eq!(r.baseline_val_accuracy, Some(0.9));
    assert_eq!(r.timeline.len(), 2);
    assert_eq!((r.timeline[1].from, r.timeline[1].to), (1, 2));
    assert_eq!(r.frozen_by_epoch, vec![(0, 0.0), (1, 0.375)]);

    let (code, out, _) = thaw(&[
        "report",
        "--metrics",
        run.join("metrics.csv").to_str().unwrap(),
        "--baseline",
        base.join("metrics.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("bwd FLOPs saved     25.00%"), "{out}");
    assert!(run.join("plot.csv").exists());
}

#[test]
fn train_eval_quantize_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        common::toml(
            &out,
            "\n[controller]\nn = 1\nwindow = 2\ntolerance_coeff = 0.9\n",
        ),
    )
    .unwrap();
    let (code, stdout, stderr) = thaw(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("val_accuracy="));
    let ckpt = out.join("checkpoint.thck");

    let (code, stdout, _) = thaw(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("accuracy="));

    let q = dir.path().join("model.thq8");
    let (code, _, _) = thaw(&[
        "quantize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        q.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(&std::fs::read(&q).unwrap()[..4], b"THQ8");

    let (code, stdout, _) = thaw(&[
        "inspect-cache",
        "--dir",
        out.join("cache").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("damaged=0"), "{stdout}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = thaw(&["train"]);
    assert_eq!(code, 1);
    let (code, _, err) = thaw(&[
        "train",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        common::toml(dir.path(), "").replace("batch_size = 16", "batch_size = 0"),
    )
    .unwrap();
    let (code, _, err) = thaw(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("train.batch_size"), "{err}");

    let junk = dir.path().join("junk.thck");
    std::fs::write(&junk, b"THCK\x01\x00").unwrap();
    let (code, _, err) = thaw(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("byte"), "{err}");

    let (code, _, _) = thaw(&["--help"]);
    assert_eq!(code, 0);
}
