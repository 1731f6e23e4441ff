use crate::error::{Error, Result};
use crate::nn::param::Parameter;
use crate::scalar::Scalar;

/// Plain SGD: `value -= lr * grad` for every non-frozen parameter with a gradient.
pub fn sgd_step<'a, T: Scalar>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, lr: T) {
    for p in params {
        if p.is_frozen() {
            continue;
        }
        let Some(grad) = p.grad().cloned() else {
            continue;
        };
        for (v, &g) in p.value_mut().data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScheduleKind {
    StepDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub kind: LrScheduleKind,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Result<Self> {
        Self::validated(LrSchedule {
            kind: LrScheduleKind::Constant,
            base_lr,
            decay_factor: 1.0,
            milestones: Vec::new(),
        })
    }

    pub fn step_decay(base_lr: f64, decay_factor: f64, milestones: Vec<usize>) -> Result<Self> {
        Self::validated(LrSchedule {
            kind: LrScheduleKind::StepDecay,
            base_lr,
            decay_factor,
            milestones,
        })
    }

    fn validated(s: Self) -> Result<Self> {
        if !(s.base_lr > 0.0 && s.base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "base_lr must be positive, got {}",
                s.base_lr
            )));
        }
        if s.kind == LrScheduleKind::StepDecay && !(s.decay_factor > 0.0 && s.decay_factor < 1.0) {
            return Err(Error::invalid(format!(
                "decay_factor must be in (0, 1), got {}",
                s.decay_factor
            )));
        }
        Ok(s)
    }

    /// `base_lr × decay_factor^(milestones ≤ epoch)`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.kind {
            LrScheduleKind::Constant => self.base_lr,
            LrScheduleKind::StepDecay => {
                let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * self.decay_factor.powi(passed as i32)
            }
        }
    }
}

pub fn step_decay_lr(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr(epoch)
}
