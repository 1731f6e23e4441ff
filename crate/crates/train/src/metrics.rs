//! Per-iteration metrics CSV, per-epoch accuracy CSV, the decision log, and the
//! summary report computed from them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::TrainError;

pub const METRICS_HEADER: &str = "iteration,epoch,loss,lr,frontmost_active,frozen_param_fraction,fwd_flops,bwd_flops,bytes_allreduced,cache_hits,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: u32,
    pub loss: f64,
    pub lr: f64,
    pub frontmost_active: usize,
    pub frozen_param_fraction: f64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub bytes_allreduced: f64,
    pub cache_hits: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Stage,
    Freeze,
    UnfreezeAll,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Stage => "stage",
            EventKind::Freeze => "freeze",
            EventKind::UnfreezeAll => "unfreeze_all",
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub iteration: u64,
    pub kind: EventKind,
    pub module: Option<usize>,
    pub slope: Option<f64>,
    pub tolerance: Option<f64>,
}

impl Event {
    pub fn line(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map_or_else(|| "-".to_string(), |v| v.to_string())
        }
        format!(
            "iter={} event={} module={} slope={} T={}",
            self.iteration,
            self.kind.as_str(),
            opt(self.module),
            opt(self.slope),
            opt(self.tolerance)
        )
    }
}

/// Writes `metrics.csv`, `epochs.csv` and `decisions.log` under one directory.
pub struct MetricsSink {
    metrics: csv::Writer<BufWriter<File>>,
    epochs: csv::Writer<BufWriter<File>>,
    decisions: BufWriter<File>,
    dir: PathBuf,
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, TrainError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    w.flush()?;
    Ok(w)
}

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let header: Vec<&str> = METRICS_HEADER.split(',').collect();
        Ok(MetricsSink {
            metrics: csv_writer(&dir.join("metrics.csv"), &header)?,
            epochs: csv_writer(&dir.join("epochs.csv"), &["epoch", "val_accuracy"])?,
            decisions: BufWriter::new(File::create(dir.join("decisions.log"))?),
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_metrics_row(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        self.metrics.serialize(row)?;
        Ok(())
    }

    pub fn write_epoch(&mut self, row: &EpochRow) -> Result<(), TrainError> {
        self.epochs.serialize(row)?;
        self.epochs.flush()?;
        Ok(())
    }

    pub fn write_event(&mut self, event: &Event) -> Result<(), TrainError> {
        writeln!(self.decisions, "{}", event.line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.metrics.flush()?;
        self.epochs.flush()?;
        self.decisions.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(TrainError::Format {
            offset: 0,
            reason: format!("{} does not have the metrics header", path.display()),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(TrainError::from))
        .collect()
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(TrainError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Totals {
    pub iterations: usize,
    pub fwd_flops: u128,
    pub bwd_flops: u128,
    pub bytes_allreduced: f64,
    pub cache_hits: u64,
    pub wall_ms: f64,
}

impl Totals {
    pub fn of(rows: &[MetricsRow]) -> Self {
        Totals {
            iterations: rows.len(),
            fwd_flops: rows.iter().map(|r| r.fwd_flops as u128).sum(),
            bwd_flops: rows.iter().map(|r| r.bwd_flops as u128).sum(),
            bytes_allreduced: rows.iter().map(|r| r.bytes_allreduced).sum(),
            cache_hits: rows.iter().map(|r| r.cache_hits).sum(),
            wall_ms: rows.iter().map(|r| r.wall_ms).sum(),
        }
    }
}

/// `1 − run/baseline`, or `None` when the baseline is zero.
pub fn saved_fraction(run: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 1.0 - run / baseline)
}

/// A change of the frozen prefix, taken from the metrics rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub iteration: u64,
    pub epoch: u32,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub totals: Totals,
    pub baseline: Option<Totals>,
    pub final_val_accuracy: Option<f64>,
    pub baseline_val_accuracy: Option<f64>,
    pub timeline: Vec<Transition>,
    /// Mean frozen parameter fraction per epoch.
    pub frozen_by_epoch: Vec<(u32, f64)>,
}

impl Report {
    pub fn fwd_saved(&self) -> Option<f64> {
        let b = self.baseline.as_ref()?;
        saved_fraction(self.totals.fwd_flops as f64, b.fwd_flops as f64)
    }

    pub fn bwd_saved(&self) -> Option<f64> {
        let b = self.baseline.as_ref()?;
        saved_fraction(self.totals.bwd_flops as f64, b.bwd_flops as f64)
    }

    pub fn bytes_saved(&self) -> Option<f64> {
        let b = self.baseline.as_ref()?;
        saved_fraction(self.totals.bytes_allreduced, b.bytes_allreduced)
    }

    pub fn render(&self) -> String {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let acc = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        let t = &self.totals;
        let mut s = String::new();
        s += &format!("iterations          {}\n", t.iterations);
        s += &format!("fwd FLOPs           {}\n", t.fwd_flops);
        s += &format!("bwd FLOPs           {}\n", t.bwd_flops);
        s += &format!("bytes all-reduced   {}\n", t.bytes_allreduced);
        s += &format!("cache hits          {}\n", t.cache_hits);
        s += &format!("wall time           {:.1} ms\n", t.wall_ms);
        s += &format!("fwd FLOPs saved     {}\n", pct(self.fwd_saved()));
        s += &format!("bwd FLOPs saved     {}\n", pct(self.bwd_saved()));
        s += &format!("bytes saved         {}\n", pct(self.bytes_saved()));
        s += &format!("final val accuracy  {}\n", acc(self.final_val_accuracy));
        if self.baseline.is_some() {
            s += &format!("baseline accuracy   {}\n", acc(self.baseline_val_accuracy));
        }
        s += "timeline\n";
        if self.timeline.is_empty() {
            s += "  (no freeze events)\n";
        }
        for tr in &self.timeline {
            let what = if tr.to > tr.from {
                "freeze"
            } else {
                "unfreeze"
            };
            s += &format!(
                "  iter {:>7} epoch {:>3}  {what:<8} frontmost {} -> {}\n",
                tr.iteration, tr.epoch, tr.from, tr.to
            );
        }
        s
    }

    /// Writes `epoch,frozen_param_fraction` rows for plotting.
    pub fn write_plot_data(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv_writer(path, &["epoch", "frozen_param_fraction"])?;
        for (e, f) in &self.frozen_by_epoch {
            w.write_record([e.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn final_accuracy(metrics_path: &Path) -> Option<f64> {
    let epochs = metrics_path.with_file_name("epochs.csv");
    read_epochs(&epochs).ok()?.last().map(|r| r.val_accuracy)
}

pub fn summarize(rows: &[MetricsRow]) -> (Vec<Transition>, Vec<(u32, f64)>) {
    let mut timeline = Vec::new();
    let mut prev = 0;
    for r in rows {
        if r.frontmost_active != prev {
            timeline.push(Transition {
                iteration: r.iteration,
                epoch: r.epoch,
                from: prev,
                to: r.frontmost_active,
            });
            prev = r.frontmost_active;
        }
    }
    let mut by_epoch: Vec<(u32, f64, usize)> = Vec::new();
    for r in rows {
        match by_epoch.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.frozen_param_fraction;
                *n += 1;
            }
            _ => by_epoch.push((r.epoch, r.frozen_param_fraction, 1)),
        }
    }
    let frozen = by_epoch
        .into_iter()
        .map(|(e, sum, n)| (e, sum / n as f64))
        .collect();
    (timeline, frozen)
}

/// Builds the report for `metrics_path`, comparing against `baseline` when given.
/// Final accuracies come from the `epochs.csv` next to each metrics file.
pub fn report(metrics_path: &Path, baseline: Option<&Path>) -> Result<Report, TrainError> {
    let rows = read_metrics(metrics_path)?;
    let (timeline, frozen_by_epoch) = summarize(&rows);
    let (baseline_totals, baseline_val_accuracy) = match baseline {
        Some(p) => (Some(Totals::of(&read_metrics(p)?)), final_accuracy(p)),
        None => (None, None),
    };
    Ok(Report {
        totals: Totals::of(&rows),
        baseline: baseline_totals,
        final_val_accuracy: final_accuracy(metrics_path),
        baseline_val_accuracy,
        timeline,
        frozen_by_epoch,
    })
}
