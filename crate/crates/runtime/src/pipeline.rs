//! Non-blocking plasticity evaluation between the training worker and the
//! controller: input, training-output and reference-output queues plus a
//! decision channel back to the worker.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, Instant};

use thaw_core::nn::Model;
use thaw_core::plasticity::{Decision, Evaluation, PlasticityController};
use thaw_core::quant::{reference_forward, ReferenceGenerator, ReferenceModel, ReferencePrecision};
use thaw_core::Tensor;

use crate::metrics::RuntimeMetrics;
use crate::queue::{spsc, Consumer, Producer};
use crate::{Result, RuntimeError};

pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

/// An input batch to evaluate at `module_index`.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub iteration: u64,
    pub batch: Tensor<f32>,
    pub module_index: usize,
    /// Learning rate in effect at `iteration`.
    pub lr: f64,
    /// Training weights to build a fresh reference model from before evaluating.
    pub snapshot: Option<Box<Model<f32>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Training,
    Reference,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub iteration: u64,
    pub activation: Tensor<f32>,
    pub source: Source,
    pub module_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscardReason {
    /// No training output with the request's iteration was available.
    Unpaired,
    /// The request is older than the pairing horizon.
    Expired,
    /// The request targets a module other than the frontmost active one.
    ModuleMismatch {
        requested: usize,
        frontmost: usize,
    },
    LoadGate,
    NoReference,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Evaluated(Evaluation),
    Discarded(DiscardReason),
}

/// Controller reply for one evaluation request, in request order.
#[derive(Debug, Clone)]
pub struct ControllerMessage {
    pub iteration: u64,
    pub outcome: Outcome,
}

impl ControllerMessage {
    pub fn decision(&self) -> Decision {
        match &self.outcome {
            Outcome::Evaluated(e) => e.decision,
            Outcome::Discarded(_) => Decision::None,
        }
    }
}

/// The queues as seen by the training worker.
pub struct WorkerSide {
    iq: Producer<EvalRequest>,
    toq: Producer<EvalResult>,
    decisions: Receiver<ControllerMessage>,
    latest_submitted: Arc<AtomicU64>,
    metrics: Arc<RuntimeMetrics>,
    waker: Option<Thread>,
}

/// The queues as seen by the controller.
pub struct ControllerSide {
    iq: Consumer<EvalRequest>,
    toq: Consumer<EvalResult>,
    roq_tx: Producer<EvalResult>,
    roq_rx: Consumer<EvalResult>,
    decisions: Sender<ControllerMessage>,
    latest_submitted: Arc<AtomicU64>,
    metrics: Arc<RuntimeMetrics>,
}

/// IQ, TOQ and ROQ of the given capacity, split into the two endpoints.
pub fn queue_set(capacity: usize, metrics: Arc<RuntimeMetrics>) -> (WorkerSide, ControllerSide) {
    let (iq_tx, iq_rx) = spsc(capacity);
    let (toq_tx, toq_rx) = spsc(capacity);
    let (roq_tx, roq_rx) = spsc(capacity);
    let (dtx, drx) = mpsc::channel();
    let latest = Arc::new(AtomicU64::new(0));
    (
        WorkerSide {
            iq: iq_tx,
            toq: toq_tx,
            decisions: drx,
            latest_submitted: Arc::clone(&latest),
            metrics: Arc::clone(&metrics),
            waker: None,
        },
        ControllerSide {
            iq: iq_rx,
            toq: toq_rx,
            roq_tx,
            roq_rx,
            decisions: dtx,
            latest_submitted: latest,
            metrics,
        },
    )
}

impl WorkerSide {
    /// Thread to unpark after each submission.
    pub fn set_waker(&mut self, thread: Thread) {
        self.waker = Some(thread);
    }

    pub fn metrics(&self) -> &Arc<RuntimeMetrics> {
        &self.metrics
    }

    /// Low-level TOQ push; `submit_evaluation` is the normal entry point.
    pub fn enqueue_training(&self, result: EvalResult) {
        if self.toq.push(result).is_some() {
            RuntimeMetrics::incr(&self.metrics.toq_evictions);
        }
    }

    /// Low-level IQ push. Returns the iteration of an evicted request.
    pub fn enqueue_request(&self, request: EvalRequest) -> Option<u64> {
        self.latest_submitted
            .fetch_max(request.iteration, Ordering::Release);
        let evicted = self.iq.push(request).map(|r| r.iteration);
        if evicted.is_some() {
            RuntimeMetrics::incr(&self.metrics.iq_evictions);
        }
        if let Some(t) = &self.waker {
            t.unpark();
        }
        evicted
    }

    pub fn iq_len(&self) -> usize {
        self.iq.len()
    }

    pub fn toq_len(&self) -> usize {
        self.toq.len()
    }
}

/// Enqueues the training activation on the TOQ and then the request on the IQ.
/// Never blocks; full queues drop their oldest entry. Returns the iteration of
/// an evicted request, whose reply will therefore never arrive.
pub fn submit_evaluation(
    side: &WorkerSide,
    batch: Tensor<f32>,
    a_t: Tensor<f32>,
    iteration: u64,
    module_index: usize,
    lr: f64,
    snapshot: Option<Model<f32>>,
) -> Option<u64> {
    side.latest_submitted
        .fetch_max(iteration, Ordering::Release);
    side.enqueue_training(EvalResult {
        iteration,
        activation: a_t,
        source: Source::Training,
        module_index,
    });
    side.enqueue_request(EvalRequest {
        iteration,
        batch,
        module_index,
        lr,
        snapshot: snapshot.map(Box::new),
    })
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub precision: ReferencePrecision,
    /// Requests older than this many iterations behind the newest submission are dropped.
    pub pairing_horizon: u64,
    /// Sleep injected once, before the first request is handled.
    pub stall: Duration,
    /// Skip evaluations while normalized system load is at or above this value.
    pub load_threshold: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            precision: ReferencePrecision::Int8,
            pairing_horizon: 1200,
            stall: Duration::ZERO,
            load_threshold: None,
        }
    }
}

/// One-minute load average divided by the number of CPUs, where available.
pub fn system_load() -> Option<f64> {
    let text = std::fs::read_to_string("/proc/loadavg").ok()?;
    let load: f64 = text.split_whitespace().next()?.parse().ok()?;
    let cpus = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    Some(load / cpus as f64)
}

/// Controller state: the freezing algorithm plus the current reference model.
pub struct Controller {
    side: ControllerSide,
    algorithm: PlasticityController,
    generator: ReferenceGenerator,
    reference: Option<ReferenceModel<f32>>,
    pending_toq: VecDeque<EvalResult>,
    config: ControllerConfig,
    stalled: bool,
}

impl Controller {
    pub fn new(
        side: ControllerSide,
        algorithm: PlasticityController,
        config: ControllerConfig,
    ) -> Self {
        Controller {
            side,
            generator: ReferenceGenerator::new(config.precision),
            algorithm,
            reference: None,
            pending_toq: VecDeque::new(),
            config,
            stalled: false,
        }
    }

    pub fn algorithm(&self) -> &PlasticityController {
        &self.algorithm
    }

    pub fn reference(&self) -> Option<&ReferenceModel<f32>> {
        self.reference.as_ref()
    }

    pub fn set_reference(&mut self, reference: ReferenceModel<f32>) {
        self.reference = Some(reference);
    }

    fn discard(&self, iteration: u64, reason: DiscardReason) -> ControllerMessage {
        let m = &self.side.metrics;
        match reason {
            DiscardReason::Unpaired | DiscardReason::Expired => {
                RuntimeMetrics::incr(&m.pairing_timeouts)
            }
            DiscardReason::ModuleMismatch { .. } => RuntimeMetrics::incr(&m.module_mismatches),
            DiscardReason::LoadGate => RuntimeMetrics::incr(&m.load_skips),
            DiscardReason::NoReference => {}
        }
        ControllerMessage {
            iteration,
            outcome: Outcome::Discarded(reason),
        }
    }

    /// Handles at most one request. Returns `None` when the IQ is empty;
    /// otherwise the reply, which is also sent to the worker.
    pub fn step(&mut self) -> Result<Option<ControllerMessage>> {
        let Some(request) = self.side.iq.pop() else {
            return Ok(None);
        };
        let started = Instant::now();
        let message = self.handle(request)?;
        let m = &self.side.metrics;
        m.eval_latency_ns
            .fetch_add(started.elapsed().as_nanos() as u64, Ordering::Relaxed);
        RuntimeMetrics::incr(&m.evaluations);
        if let Outcome::Evaluated(e) = &message.outcome {
            if !e.decision.is_none() {
                RuntimeMetrics::incr(&m.decisions_emitted);
            }
        }
        // A closed channel means the worker is gone; the reply is simply dropped.
        let _ = self.side.decisions.send(message.clone());
        Ok(Some(message))
    }

    fn handle(&mut self, request: EvalRequest) -> Result<ControllerMessage> {
        let EvalRequest {
            iteration,
            batch,
            module_index,
            lr,
            snapshot,
        } = request;
        if let Some(model) = snapshot {
            self.reference = Some(self.generator.snapshot(&model, iteration)?);
        }
        while let Some(r) = self.side.toq.pop() {
            self.pending_toq.push_back(r);
        }
        // Training outputs whose request was evicted from the IQ can never pair.
        while self
            .pending_toq
            .front()
            .is_some_and(|r| r.iteration < iteration)
        {
            self.pending_toq.pop_front();
            RuntimeMetrics::incr(&self.side.metrics.pairing_timeouts);
        }
        let latest = self.side.latest_submitted.load(Ordering::Acquire);
        if latest.saturating_sub(iteration) > self.config.pairing_horizon {
            self.take_training(iteration);
            return Ok(self.discard(iteration, DiscardReason::Expired));
        }
        let Some(a_t) = self.take_training(iteration) else {
            return Ok(self.discard(iteration, DiscardReason::Unpaired));
        };
        let frontmost = self.algorithm.frontmost_active();
        if a_t.module_index != module_index || module_index != frontmost {
            return Ok(self.discard(
                iteration,
                DiscardReason::ModuleMismatch {
                    requested: module_index,
                    frontmost,
                },
            ));
        }
        if let Some(threshold) = self.config.load_threshold {
            if system_load().is_some_and(|l| l >= threshold) {
                return Ok(self.discard(iteration, DiscardReason::LoadGate));
            }
        }
        if !self.algorithm.can_freeze_more() {
            let evaluation = self.algorithm.lr_only(lr);
            return Ok(ControllerMessage {
                iteration,
                outcome: Outcome::Evaluated(evaluation),
            });
        }
        let Some(reference) = self.reference.as_ref() else {
            return Ok(self.discard(iteration, DiscardReason::NoReference));
        };
        let a_r = reference_forward(reference, &batch, module_index)?;
        let evicted = self.side.roq_tx.push(EvalResult {
            iteration,
            activation: a_r,
            source: Source::Reference,
            module_index,
        });
        if evicted.is_some() {
            RuntimeMetrics::incr(&self.side.metrics.roq_evictions);
        }
        let a_r = self
            .side
            .roq_rx
            .pop()
            .ok_or_else(|| RuntimeError::Protocol("reference output vanished".into()))?;
        let evaluation = self
            .algorithm
            .check_plasticity(&a_t.activation, &a_r.activation, lr)?;
        Ok(ControllerMessage {
            iteration,
            outcome: Outcome::Evaluated(evaluation),
        })
    }

    fn take_training(&mut self, iteration: u64) -> Option<EvalResult> {
        if self
            .pending_toq
            .front()
            .is_some_and(|r| r.iteration == iteration)
        {
            self.pending_toq.pop_front()
        } else {
            None
        }
    }

    fn stall_once(&mut self, shutdown: &AtomicBool) {
        if self.stalled || self.config.stall.is_zero() {
            return;
        }
        self.stalled = true;
        let deadline = Instant::now() + self.config.stall;
        while !shutdown.load(Ordering::Acquire) {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            thread::sleep((deadline - now).min(Duration::from_millis(5)));
        }
    }

    /// Controller thread body: handles requests until `shutdown` is set.
    pub fn run(mut self, shutdown: Arc<AtomicBool>) -> Result<Controller> {
        while !shutdown.load(Ordering::Acquire) {
            if self.side.iq.is_empty() {
                thread::park_timeout(Duration::from_millis(2));
                continue;
            }
            self.stall_once(&shutdown);
            if shutdown.load(Ordering::Acquire) {
                break;
            }
            self.step()?;
        }
        Ok(self)
    }
}

/// A running controller thread.
pub struct ControllerHandle {
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<Controller>>>,
}

impl ControllerHandle {
    pub fn thread(&self) -> Option<&Thread> {
        self.thread.as_ref().map(|h| h.thread())
    }

    /// Signals shutdown and waits for the thread, returning the controller.
    pub fn stop(mut self) -> Result<Controller> {
        self.shutdown.store(true, Ordering::Release);
        let handle = self.thread.take().expect("joined once");
        handle.thread().unpark();
        handle
            .join()
            .map_err(|_| RuntimeError::Protocol("controller thread panicked".into()))?
    }
}

impl Drop for ControllerHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        if let Some(h) = self.thread.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

/// Starts `controller` on its own thread and registers it as the worker's waker.
pub fn spawn_controller(controller: Controller, worker: &mut WorkerSide) -> ControllerHandle {
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&shutdown);
    let handle = thread::Builder::new()
        .name("controller".into())
        .spawn(move || controller.run(flag))
        .expect("spawn controller thread");
    worker.set_waker(handle.thread().clone());
    ControllerHandle {
        shutdown,
        thread: Some(handle),
    }
}

/// Worker-side buffer that releases each controller reply at a fixed lag after
/// its request, so decisions land on the same iteration boundary regardless of
/// controller timing.
pub struct DecisionInbox {
    lag: u64,
    strict: bool,
    outstanding: VecDeque<u64>,
    arrived: VecDeque<ControllerMessage>,
}

impl DecisionInbox {
    /// With `strict`, `due` waits for replies that are due but missing; otherwise a
    /// late reply is released at the first boundary after it arrives.
    pub fn new(lag: u64, strict: bool) -> Self {
        DecisionInbox {
            lag,
            strict,
            outstanding: VecDeque::new(),
            arrived: VecDeque::new(),
        }
    }

    pub fn lag(&self) -> u64 {
        self.lag
    }

    pub fn record_submission(&mut self, iteration: u64, evicted: Option<u64>) {
        self.outstanding.push_back(iteration);
        if let Some(e) = evicted {
            self.outstanding.retain(|&i| i != e);
        }
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    fn accept(&mut self, m: ControllerMessage) {
        self.outstanding.retain(|&i| i != m.iteration);
        self.arrived.push_back(m);
    }

    /// Replies to release at the boundary before `iteration`, in emission order.
    pub fn due(&mut self, side: &WorkerSide, iteration: u64) -> Result<Vec<ControllerMessage>> {
        loop {
            match side.decisions.try_recv() {
                Ok(m) => self.accept(m),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    if self.strict && self.first_overdue(iteration).is_some() {
                        return Err(RuntimeError::Protocol("controller exited".into()));
                    }
                    break;
                }
            }
        }
        if self.strict {
            while self.first_overdue(iteration).is_some() {
                match side.decisions.recv_timeout(Duration::from_millis(50)) {
                    Ok(m) => self.accept(m),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(RuntimeError::Protocol("controller exited".into()))
                    }
                }
            }
        }
        let mut out = Vec::new();
        while self
            .arrived
            .front()
            .is_some_and(|m| m.iteration + self.lag <= iteration)
        {
            let m = self.arrived.pop_front().expect("checked");
            if m.iteration + self.lag < iteration {
                RuntimeMetrics::incr(&side.metrics.late_decisions);
            }
            out.push(m);
        }
        Ok(out)
    }

    fn first_overdue(&self, iteration: u64) -> Option<u64> {
        self.outstanding
            .iter()
            .copied()
            .find(|&i| i + self.lag <= iteration)
    }
}

/// Applies a decision to the model at an iteration boundary.
pub fn apply_decision(model: &mut Model<f32>, decision: &Decision) -> Result<()> {
    match *decision {
        Decision::None => {}
        Decision::Freeze { module, .. } => model.freeze_module(module)?,
        Decision::UnfreezeAll { .. } => model.unfreeze_all(),
    }
    Ok(())
}
