use std::sync::atomic::{AtomicU64, Ordering};

/// Counters shared by the worker and controller sides of the evaluation pipeline.
#[derive(Debug, Default)]
pub struct RuntimeMetrics {
    pub iq_evictions: AtomicU64,
    pub toq_evictions: AtomicU64,
    pub roq_evictions: AtomicU64,
    pub pairing_timeouts: AtomicU64,
    pub module_mismatches: AtomicU64,
    pub load_skips: AtomicU64,
    pub evaluations: AtomicU64,
    pub decisions_emitted: AtomicU64,
    pub decisions_applied: AtomicU64,
    /// Decisions that reached the worker after the boundary they were due at.
    pub late_decisions: AtomicU64,
    pub eval_latency_ns: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub iq_evictions: u64,
    pub toq_evictions: u64,
    pub roq_evictions: u64,
    pub pairing_timeouts: u64,
    pub module_mismatches: u64,
    pub load_skips: u64,
    pub evaluations: u64,
    pub decisions_emitted: u64,
    pub decisions_applied: u64,
    pub late_decisions: u64,
    pub eval_latency_ns: u64,
}

impl RuntimeMetrics {
    pub fn incr(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        MetricsSnapshot {
            iq_evictions: get(&self.iq_evictions),
            toq_evictions: get(&self.toq_evictions),
            roq_evictions: get(&self.roq_evictions),
            pairing_timeouts: get(&self.pairing_timeouts),
            module_mismatches: get(&self.module_mismatches),
            load_skips: get(&self.load_skips),
            evaluations: get(&self.evaluations),
            decisions_emitted: get(&self.decisions_emitted),
            decisions_applied: get(&self.decisions_applied),
            late_decisions: get(&self.late_decisions),
            eval_latency_ns: get(&self.eval_latency_ns),
        }
    }
}

impl MetricsSnapshot {
    pub fn mean_eval_latency_ms(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.eval_latency_ns as f64 / self.evaluations as f64 / 1e6
        }
    }
}
