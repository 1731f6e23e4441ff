//! The training life cycle: a bootstrapping stage watched through the loss,
//! then knowledge-guided training where the controller freezes converged
//! modules. `K` worker threads run in lock step, joined at the all-reduce.

use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thaw_core::data::{load_idx, next_batch, sample_epoch, synth_dataset, Dataset, SampleSchedule};
use thaw_core::nn::{
    argmax_rows, count_flops, frozen_forward_fraction, sgd_step, softmax_cross_entropy, Mode, Model,
};
use thaw_core::plasticity::{ControllerParams, Decision, FreezeState, PlasticityController, Stage};
use thaw_core::Tensor;
use thaw_runtime::cache::{
    cache_eligibility, ActivationCache, CacheConfig, CacheStats, PrefetchSchedule,
};
use thaw_runtime::{
    apply_decision, queue_set, spawn_controller, submit_evaluation, Controller, ControllerConfig,
    ControllerHandle, DecisionInbox, MetricsSnapshot, Outcome, RuntimeMetrics, WorkerSide,
};

use crate::allreduce::allreduce_grads;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{DataSource, TrainConfig};
use crate::metrics::{EpochRow, Event, EventKind, MetricsRow, MetricsSink};
use crate::TrainError;

const EVAL_BATCH: usize = 256;

/// Everything a finished run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub epochs: Vec<EpochRow>,
    pub events: Vec<Event>,
    /// Worker 0's final model.
    pub model: Model<f32>,
    pub runtime: MetricsSnapshot,
    pub cache: Vec<CacheStats>,
    pub eval_interval: usize,
    pub iterations_per_epoch: usize,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    /// Iteration at which bootstrapping ended.
    pub stage_iteration: Option<u64>,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// Loads or generates the dataset and splits off the validation set.
pub fn prepare_data(config: &TrainConfig) -> Result<(Dataset, Dataset), TrainError> {
    let full = match &config.data.source {
        DataSource::Synth(spec) => synth_dataset(spec)?,
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    Ok(full.split_holdout(config.data.val_fraction, config.data.seed)?)
}

/// Top-1 accuracy of inference-mode predictions over the whole dataset.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let x = dataset.samples.slice_rows(start, end)?;
        let x = x.reshape(&batch_shape(model.input_shape(), end - start))?;
        let pred = argmax_rows(&model.infer(&x)?);
        correct += pred
            .iter()
            .zip(&dataset.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn batch_shape(sample: &[usize], b: usize) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(sample);
    s
}

/// Lock-step iteration count: the shortest worker shard decides.
pub fn iterations_per_epoch(samples: usize, workers: usize, batch_size: usize) -> usize {
    (0..workers)
        .map(|w| (samples + workers - 1 - w) / workers)
        .map(|shard| shard.div_ceil(batch_size))
        .min()
        .unwrap_or(0)
}

struct Step {
    epoch: usize,
    batch_index: usize,
    lr: f64,
    apply: Vec<Decision>,
    /// Frozen prefix expected once `apply` has run.
    frontmost: usize,
    freeze_version: u32,
    evaluate: bool,
    snapshot: bool,
}

enum Command {
    Step(Step),
    Averaged(Arc<Vec<Tensor<f32>>>),
    Validate,
    Finish,
}

struct StepReport {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    fwd_flops: u64,
    bwd_flops: u64,
    cache_hit: bool,
    eval: Option<(Tensor<f32>, Tensor<f32>)>,
    snapshot: Option<Model<f32>>,
}

enum Report {
    Step(Box<StepReport>),
    Accuracy(f64),
    Failed(String),
}

struct Worker<'a> {
    id: usize,
    workers: usize,
    model: Model<f32>,
    cache: Option<ActivationCache>,
    train: &'a Dataset,
    val: &'a Dataset,
    config: &'a TrainConfig,
    schedule: Option<SampleSchedule>,
}

impl Worker<'_> {
    fn run(mut self, rx: Receiver<Command>, tx: Sender<Report>) -> (Model<f32>, CacheStats) {
        while let Ok(cmd) = rx.recv() {
            let result = match cmd {
                Command::Step(step) => self.step(step, &rx, &tx),
                Command::Validate => evaluate(&self.model, self.val).map(|a| {
                    let _ = tx.send(Report::Accuracy(a));
                }),
                Command::Averaged(_) => Err(TrainError::Runtime("gradients without a step".into())),
                Command::Finish => break,
            };
            if let Err(e) = result {
                let _ = tx.send(Report::Failed(format!("worker {}: {e}", self.id)));
                break;
            }
        }
        let stats = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        (self.model, stats)
    }

    fn frozen_flags(&self) -> Vec<bool> {
        self.model.parameters().map(|p| p.is_frozen()).collect()
    }

    fn step(
        &mut self,
        s: Step,
        rx: &Receiver<Command>,
        tx: &Sender<Report>,
    ) -> Result<(), TrainError> {
        for d in &s.apply {
            apply_decision(&mut self.model, d)?;
            if let Some(c) = self.cache.as_mut() {
                c.invalidate()?;
            }
        }
        let frontmost = self.model.frontmost_active();
        if frontmost != s.frontmost {
            return Err(TrainError::Runtime(format!(
                "frozen prefix {frontmost} differs from the coordinator's {}",
                s.frontmost
            )));
        }
        let flags = self.frozen_flags();
        let cfg = self.config;
        if self.schedule.as_ref().map(|sc| sc.epoch) != Some(s.epoch) {
            self.schedule = Some(sample_epoch(
                self.train,
                cfg.seed,
                s.epoch,
                self.id,
                self.workers,
                cfg.batch_size,
            )?);
        }
        let schedule = self.schedule.as_ref().expect("set above");
        let batch = next_batch(
            self.train,
            schedule,
            s.batch_index,
            &cfg.data.augment,
            cfg.seed,
        )?;
        let b = batch.len();
        let snapshot = s.snapshot.then(|| self.model.snapshot());

        let boundary = frontmost.saturating_sub(1) as u32;
        let eligible = match &self.cache {
            Some(c) if c.is_enabled() && frontmost > 0 => cache_eligibility(
                frozen_forward_fraction(&self.model, frontmost)?,
                cfg.cache.threshold,
            ),
            _ => false,
        };
        let mut cache_hit = false;
        let start_input = if frontmost == 0 {
            batch.inputs.clone()
        } else {
            let cached = if eligible {
                self.cache
                    .as_mut()
                    .and_then(|c| c.get(&batch.sample_ids, boundary, s.freeze_version))
            } else {
                None
            };
            match cached {
                Some(a) => {
                    cache_hit = true;
                    a
                }
                None => {
                    let a =
                        self.model
                            .forward_range(&batch.inputs, 0, frontmost, Mode::Inference)?;
                    if eligible {
                        if let Some(c) = self.cache.as_mut() {
                            c.put(
                                s.epoch as u32,
                                s.batch_index as u32,
                                &batch.sample_ids,
                                &a,
                                boundary,
                                s.freeze_version,
                            )?;
                        }
                    }
                    a
                }
            }
        };
        let hook = s.evaluate.then_some(frontmost);
        let (logits, a_t) = self
            .model
            .forward_from(&start_input, frontmost, Mode::Train, hook)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
        self.model.backward(&grad)?;
        let flops = count_flops(&self.model, frontmost, b, cache_hit)?;
        let grads = self
            .model
            .active_parameters_mut()
            .map(|p| {
                p.grad()
                    .cloned()
                    .ok_or_else(|| TrainError::Runtime(format!("{} has no gradient", p.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let eval = match a_t {
            Some(a) => Some((batch.inputs, a)),
            None => None,
        };
        let report = StepReport {
            loss: loss as f64,
            grads,
            fwd_flops: flops.forward,
            bwd_flops: flops.backward,
            cache_hit,
            eval,
            snapshot,
        };
        tx.send(Report::Step(Box::new(report)))
            .map_err(|_| TrainError::Runtime("coordinator gone".into()))?;

        let averaged = match rx.recv() {
            Ok(Command::Averaged(g)) => g,
            Ok(Command::Finish) | Err(_) => return Ok(()),
            Ok(_) => return Err(TrainError::Runtime("expected averaged gradients".into())),
        };
        for (p, g) in self.model.active_parameters_mut().zip(averaged.iter()) {
            p.set_grad(g.clone())?;
        }
        sgd_step(self.model.active_parameters_mut(), s.lr as f32);
        self.model.zero_grads();
        if self.frozen_flags() != flags {
            return Err(TrainError::Runtime(
                "frozen flags changed mid-iteration".into(),
            ));
        }

        if eligible {
            if let Some(c) = self.cache.as_mut() {
                let depth = cfg.cache.prefetch_depth;
                let upcoming = schedule.lookahead(s.batch_index, depth);
                c.prefetch(
                    &PrefetchSchedule { upcoming, depth },
                    boundary,
                    s.freeze_version,
                );
            }
        }
        Ok(())
    }
}

/// Each worker's final model and cache statistics, plus the error that stopped the run.
type Finished = (Vec<(Model<f32>, CacheStats)>, Option<TrainError>);

struct ControllerLink {
    side: WorkerSide,
    inbox: DecisionInbox,
    handle: ControllerHandle,
}

fn start_controller(
    config: &TrainConfig,
    modules: usize,
    n: usize,
) -> Result<ControllerLink, TrainError> {
    let c = &config.controller;
    let params = controller_params(config, n);
    let algorithm = PlasticityController::new(params, modules)?;
    let metrics = Arc::new(RuntimeMetrics::default());
    let (mut side, cside) = queue_set(c.queue_capacity, metrics);
    let controller = Controller::new(
        cside,
        algorithm,
        ControllerConfig {
            precision: config.reference.precision,
            pairing_horizon: c.pairing_horizon.unwrap_or(4 * n as u64),
            stall: Duration::from_millis(c.stall_ms),
            load_threshold: c.load_threshold,
        },
    );
    let handle = spawn_controller(controller, &mut side);
    let lag = c.decision_lag.unwrap_or(n) as u64;
    Ok(ControllerLink {
        side,
        inbox: DecisionInbox::new(lag, c.strict_decisions),
        handle,
    })
}

fn controller_params(config: &TrainConfig, n: usize) -> ControllerParams {
    let c = &config.controller;
    ControllerParams {
        eval_interval: n,
        window: c.window,
        tolerance_coeff: c.tolerance_coeff,
        bootstrap_rate: c.bootstrap_rate,
        lr_unfreeze_factor: c.lr_unfreeze_factor,
        ..ControllerParams::default()
    }
}

/// Runs the configured training and writes metrics, the decision log and a
/// final checkpoint under `config.out`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let (train_set, val_set) = prepare_data(config)?;
    let input_shape = train_set.sample_shape().to_vec();
    let classes = train_set.classes;
    let template = config.build_model(&input_shape, classes)?;
    let modules = template.num_modules();
    let k = config.workers;
    if train_set.len() < k {
        return Err(TrainError::Config(format!(
            "workers: {k} workers but only {} training samples",
            train_set.len()
        )));
    }
    let ipe = iterations_per_epoch(train_set.len(), k, config.batch_size);
    let total = ipe * config.epochs;
    let n = config.eval_interval(total, modules);
    info!(
        "{} training samples, {ipe} iterations/epoch, n = {n}",
        train_set.len()
    );

    std::fs::create_dir_all(&config.out)?;
    let mut sink = MetricsSink::create(&config.out)?;
    let use_cache = config.freeze && config.cache.enabled;
    let mut caches = Vec::new();
    if use_cache {
        let dir = config.cache_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        for w in 0..k {
            let mut cc = CacheConfig::new(&dir, w);
            cc.prefetch_depth = config.cache.prefetch_depth;
            cc.disk_limit = config.cache.disk_limit_bytes;
            caches.push(Some(ActivationCache::open(cc)?));
        }
    } else {
        caches.resize_with(k, || None);
    }

    let mut link = if config.freeze {
        Some(start_controller(config, modules, n)?)
    } else {
        None
    };
    let params = controller_params(config, n);
    let mut stage = FreezeState::new(config.controller.window);
    let update_period = config
        .reference
        .update_period
        .unwrap_or(config.controller.window) as u64;

    let module_params: Vec<usize> = template.modules().iter().map(|m| m.param_count()).collect();
    let total_params: usize = module_params.iter().sum();
    let frozen_fraction = |frontmost: usize| -> f64 {
        if total_params == 0 {
            0.0
        } else {
            module_params[..frontmost].iter().sum::<usize>() as f64 / total_params as f64
        }
    };

    let mut rows = Vec::with_capacity(total);
    let mut epoch_rows = Vec::new();
    let mut events = Vec::new();
    let mut stage_iteration = None;
    let mut frontmost = 0usize;
    let mut freeze_version = 0u32;
    let mut evals_submitted = 0u64;
    let mut iteration = 0u64;
    let mut loss_window: Vec<f64> = Vec::new();

    let outcome = thread::scope(|scope| -> Result<Finished, TrainError> {
        let mut cmd_tx = Vec::with_capacity(k);
        let mut report_rx = Vec::with_capacity(k);
        let mut handles = Vec::with_capacity(k);
        for (w, cache) in caches.into_iter().enumerate() {
            let (ctx, crx) = mpsc::channel();
            let (rtx, rrx) = mpsc::channel();
            let worker = Worker {
                id: w,
                workers: k,
                model: template.snapshot(),
                cache,
                train: &train_set,
                val: &val_set,
                config,
                schedule: None,
            };
            handles.push(
                thread::Builder::new()
                    .name(format!("worker{w}"))
                    .spawn_scoped(scope, move || worker.run(crx, rtx))?,
            );
            cmd_tx.push(ctx);
            report_rx.push(rrx);
        }
        let broadcast = |cmd: &dyn Fn() -> Command| {
            for tx in &cmd_tx {
                let _ = tx.send(cmd());
            }
        };

        let mut failure: Option<TrainError> = None;
        'epochs: for epoch in 0..config.epochs {
            let lr = config.lr.lr(epoch);
            for batch_index in 0..ipe {
                let started = Instant::now();
                let mut apply = Vec::new();
                if let Some(l) = link.as_mut() {
                    let due = match l.inbox.due(&l.side, iteration) {
                        Ok(d) => d,
                        Err(e) => {
                            failure = Some(TrainError::Aborted {
                                iteration,
                                message: e.to_string(),
                            });
                            break 'epochs;
                        }
                    };
                    for msg in due {
                        let Outcome::Evaluated(e) = &msg.outcome else {
                            continue;
                        };
                        let event = match e.decision {
                            Decision::None => continue,
                            Decision::Freeze {
                                module,
                                slope,
                                tolerance,
                            } => {
                                frontmost = module + 1;
                                Event {
                                    iteration,
                                    kind: EventKind::Freeze,
                                    module: Some(module),
                                    slope: Some(slope),
                                    tolerance: Some(tolerance),
                                }
                            }
                            Decision::UnfreezeAll { from_module } => {
                                frontmost = 0;
                                Event {
                                    iteration,
                                    kind: EventKind::UnfreezeAll,
                                    module: Some(from_module),
                                    slope: None,
                                    tolerance: None,
                                }
                            }
                        };
                        freeze_version += 1;
                        RuntimeMetrics::incr(&l.side.metrics().decisions_applied);
                        info!("{}", event.line());
                        sink.write_event(&event)?;
                        events.push(event);
                        apply.push(e.decision);
                    }
                }

                let mut evaluate_now = false;
                if iteration > 0 && iteration.is_multiple_of(n as u64) {
                    if stage.stage == Stage::Bootstrapping && !loss_window.is_empty() {
                        let smoothed = loss_window.iter().sum::<f64>() / loss_window.len() as f64;
                        if stage.bootstrap_update(smoothed, &params) == Stage::KnowledgeGuided {
                            let event = Event {
                                iteration,
                                kind: EventKind::Stage,
                                module: None,
                                slope: None,
                                tolerance: None,
                            };
                            info!("{}", event.line());
                            sink.write_event(&event)?;
                            events.push(event);
                            stage_iteration = Some(iteration);
                        }
                    }
                    loss_window.clear();
                    evaluate_now = link.is_some() && stage.stage == Stage::KnowledgeGuided;
                }
                let snapshot = evaluate_now && evals_submitted.is_multiple_of(update_period);

                for (w, tx) in cmd_tx.iter().enumerate() {
                    let step = Step {
                        epoch,
                        batch_index,
                        lr,
                        apply: apply.clone(),
                        frontmost,
                        freeze_version,
                        evaluate: evaluate_now && w == 0,
                        snapshot: snapshot && w == 0,
                    };
                    let _ = tx.send(Command::Step(step));
                }
                let mut reports = Vec::with_capacity(k);
                for rx in &report_rx {
                    match rx.recv() {
                        Ok(Report::Step(r)) => reports.push(r),
                        Ok(Report::Failed(msg)) => {
                            failure = Some(TrainError::Aborted {
                                iteration,
                                message: msg,
                            });
                            break 'epochs;
                        }
                        Ok(Report::Accuracy(_)) | Err(_) => {
                            failure = Some(TrainError::Aborted {
                                iteration,
                                message: "worker stopped unexpectedly".into(),
                            });
                            break 'epochs;
                        }
                    }
                }
                let grads: Vec<Vec<Tensor<f32>>> = reports
                    .iter_mut()
                    .map(|r| std::mem::take(&mut r.grads))
                    .collect();
                let (averaged, bytes) = match allreduce_grads(&grads) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(TrainError::Aborted {
                            iteration,
                            message: e.to_string(),
                        });
                        break 'epochs;
                    }
                };
                let averaged = Arc::new(averaged);
                broadcast(&|| Command::Averaged(Arc::clone(&averaged)));

                if let (Some(l), Some((batch, a_t))) = (link.as_mut(), reports[0].eval.take()) {
                    let snap = reports[0].snapshot.take();
                    let evicted =
                        submit_evaluation(&l.side, batch, a_t, iteration, frontmost, lr, snap);
                    l.inbox.record_submission(iteration, evicted);
                    evals_submitted += 1;
                }

                let loss = reports.iter().map(|r| r.loss).sum::<f64>() / k as f64;
                loss_window.push(loss);
                let row = MetricsRow {
                    iteration,
                    epoch: epoch as u32,
                    loss,
                    lr,
                    frontmost_active: frontmost,
                    frozen_param_fraction: frozen_fraction(frontmost),
                    fwd_flops: reports.iter().map(|r| r.fwd_flops).sum(),
                    bwd_flops: reports.iter().map(|r| r.bwd_flops).sum(),
                    bytes_allreduced: bytes,
                    cache_hits: reports.iter().map(|r| r.cache_hit as u64).sum(),
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                sink.write_metrics_row(&row)?;
                rows.push(row);
                iteration += 1;
            }

            let _ = cmd_tx[0].send(Command::Validate);
            match report_rx[0].recv() {
                Ok(Report::Accuracy(a)) => {
                    let row = EpochRow {
                        epoch: epoch as u32,
                        val_accuracy: a,
                    };
                    info!("epoch {epoch}: val accuracy {a:.4}");
                    sink.write_epoch(&row)?;
                    epoch_rows.push(row);
                }
                Ok(Report::Failed(msg)) => {
                    failure = Some(TrainError::Aborted {
                        iteration,
                        message: msg,
                    });
                    break 'epochs;
                }
                _ => {
                    failure = Some(TrainError::Aborted {
                        iteration,
                        message: "validation failed".into(),
                    });
                    break 'epochs;
                }
            }
        }
        broadcast(&|| Command::Finish);
        let mut finished = Vec::with_capacity(k);
        for h in handles {
            finished.push(
                h.join()
                    .map_err(|_| TrainError::Runtime("worker thread panicked".into()))?,
            );
        }
        Ok((finished, failure))
    })?;
    sink.flush()?;

    let (finished, failure) = outcome;
    let (controller_state, runtime) = match link {
        Some(l) => {
            let snapshot = l.side.metrics().snapshot();
            let controller = l.handle.stop()?;
            (Some(controller.algorithm().state().clone()), snapshot)
        }
        None => (None, MetricsSnapshot::default()),
    };
    if let Some(err) = failure {
        if let TrainError::Aborted { iteration, message } = &err {
            let _ = std::fs::write(
                config.out.join("failed.txt"),
                format!("iteration={iteration} error={message}\n"),
            );
        }
        return Err(err);
    }

    let mut models = finished.into_iter();
    let (model, stats0) = models.next().expect("at least one worker");
    let mut cache = vec![stats0];
    cache.extend(models.map(|(_, s)| s));
    if runtime.late_decisions > 0 {
        warn!("{} decisions were applied late", runtime.late_decisions);
    }

    let mut freeze = controller_state.unwrap_or_else(|| stage.clone());
    freeze.stage = stage.stage;
    freeze.last_loss = stage.last_loss;
    freeze.frontmost_active = model.frontmost_active();
    let checkpoint = Checkpoint {
        config_hash: config.hash(),
        config_text: config.source_text.clone(),
        input_shape: input_shape.clone(),
        classes,
        freeze,
        epoch: config.epochs as u32,
        iteration,
        seed: config.seed,
        freeze_version,
        tensors: Checkpoint::tensors_of(&model),
    };
    let checkpoint_path = config.out.join("checkpoint.thck");
    save_checkpoint(&checkpoint_path, &checkpoint)?;

    Ok(TrainOutcome {
        metrics: rows,
        epochs: epoch_rows,
        events,
        model,
        runtime,
        cache,
        eval_interval: n,
        iterations_per_epoch: ipe,
        input_shape,
        classes,
        out: config.out.clone(),
        checkpoint: checkpoint_path,
        stage_iteration,
    })
}
