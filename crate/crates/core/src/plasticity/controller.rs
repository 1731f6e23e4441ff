//! Freeze/unfreeze decisions from the plasticity of the frontmost active module.

use std::fmt;

use crate::error::{Error, Result};
use crate::plasticity::history::{
    init_tolerance, smooth_plasticity, window_linear_fit, PlasticityHistory,
};
use crate::plasticity::sp_loss::sp_loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative slack when comparing learning rates, so `0.1·0.1` counts as a 10× drop.
const LR_COMPARE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    /// Evaluation interval in iterations.
    pub eval_interval: usize,
    /// Stale-evaluation count and history window.
    pub window: usize,
    pub tolerance_coeff: f64,
    /// Smallest tolerance, used when the first slopes are all zero.
    pub tolerance_floor: f64,
    pub bootstrap_rate: f64,
    pub lr_unfreeze_factor: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            eval_interval: 300,
            window: 10,
            tolerance_coeff: 0.2,
            tolerance_floor: 1e-9,
            bootstrap_rate: 0.10,
            lr_unfreeze_factor: 10.0,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval < 1 {
            return Err(Error::invalid("eval_interval must be >= 1"));
        }
        if self.window < 1 {
            return Err(Error::invalid("window must be >= 1"));
        }
        if !(self.tolerance_coeff > 0.0 && self.tolerance_coeff < 1.0) {
            return Err(Error::invalid(format!(
                "tolerance_coeff must be in (0, 1), got {}",
                self.tolerance_coeff
            )));
        }
        if !(self.tolerance_floor > 0.0) {
            return Err(Error::invalid("tolerance_floor must be positive"));
        }
        if !(self.bootstrap_rate > 0.0) {
            return Err(Error::invalid("bootstrap_rate must be positive"));
        }
        if !(self.lr_unfreeze_factor > 1.0) {
            return Err(Error::invalid("lr_unfreeze_factor must be > 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Bootstrapping,
    KnowledgeGuided,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Bootstrapping => "bootstrapping",
            Stage::KnowledgeGuided => "knowledge_guided",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeState {
    pub frontmost_active: usize,
    pub stale_counter: usize,
    pub stage: Stage,
    pub lr_at_frontmost_freeze: Option<f64>,
    /// Current stale-count threshold and history window; halved on every unfreeze.
    pub window: usize,
    /// Last smoothed training loss seen while bootstrapping.
    pub last_loss: Option<f64>,
}

impl FreezeState {
    pub fn new(window: usize) -> Self {
        FreezeState {
            frontmost_active: 0,
            stale_counter: 0,
            stage: Stage::Bootstrapping,
            lr_at_frontmost_freeze: None,
            window,
            last_loss: None,
        }
    }

    /// Feeds the moving-average training loss of the last interval. Leaves the
    /// bootstrapping stage, for good, once the relative change drops below
    /// `bootstrap_rate`.
    pub fn bootstrap_update(&mut self, smoothed_loss: f64, params: &ControllerParams) -> Stage {
        if self.stage == Stage::KnowledgeGuided {
            return self.stage;
        }
        if let Some(prev) = self.last_loss {
            if prev > 0.0 && ((smoothed_loss - prev).abs() / prev) < params.bootstrap_rate {
                self.stage = Stage::KnowledgeGuided;
            }
        }
        self.last_loss = Some(smoothed_loss);
        self.stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    None,
    Freeze {
        module: usize,
        slope: f64,
        tolerance: f64,
    },
    UnfreezeAll {
        from_module: usize,
    },
}

impl Decision {
    pub fn is_none(&self) -> bool {
        matches!(self, Decision::None)
    }
}

/// What one evaluation observed, for logging and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub module: usize,
    pub plasticity: Option<f64>,
    pub smoothed: Option<f64>,
    pub slope: Option<f64>,
    pub tolerance: Option<f64>,
    pub stale_counter: usize,
    pub decision: Decision,
}

pub type UnfreezeHook = Box<dyn FnMut(&FreezeState, f64) -> bool + Send>;

/// Runs the freezing algorithm over the frontmost active module.
pub struct PlasticityController {
    params: ControllerParams,
    state: FreezeState,
    history: PlasticityHistory,
    num_modules: usize,
    custom_unfreeze: Option<UnfreezeHook>,
}

impl fmt::Debug for PlasticityController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlasticityController")
            .field("params", &self.params)
            .field("state", &self.state)
            .field("num_modules", &self.num_modules)
            .finish_non_exhaustive()
    }
}

impl PlasticityController {
    /// A controller in the knowledge-guided stage for a model with `num_modules` modules.
    pub fn new(params: ControllerParams, num_modules: usize) -> Result<Self> {
        params.validate()?;
        if num_modules < 1 {
            return Err(Error::invalid("model has no modules"));
        }
        let mut state = FreezeState::new(params.window);
        state.stage = Stage::KnowledgeGuided;
        Ok(PlasticityController {
            params,
            state,
            history: PlasticityHistory::new(num_modules),
            num_modules,
            custom_unfreeze: None,
        })
    }

    pub fn state(&self) -> &FreezeState {
        &self.state
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn history(&self) -> &PlasticityHistory {
        &self.history
    }

    /// Installs a user predicate for schedules other than step decay (e.g. cyclical
    /// LR). It is consulted after the step-decay check and returns whether to unfreeze.
    pub fn set_custom_unfreeze(&mut self, hook: UnfreezeHook) {
        self.custom_unfreeze = Some(hook);
    }

    pub fn frontmost_active(&self) -> usize {
        self.state.frontmost_active
    }

    /// Whether the frontmost module may still be frozen (it is not the last one).
    pub fn can_freeze_more(&self) -> bool {
        self.state.frontmost_active + 1 < self.num_modules
    }

    /// Computes the plasticity of the frontmost module from paired activations and
    /// steps the freezing algorithm.
    pub fn check_plasticity<T: Scalar>(
        &mut self,
        a_t: &Tensor<T>,
        a_r: &Tensor<T>,
        current_lr: f64,
    ) -> Result<Evaluation> {
        if !self.can_freeze_more() {
            return Ok(self.lr_only(current_lr));
        }
        let p = sp_loss(a_t, a_r)?.as_f64();
        Ok(self.observe(p, current_lr))
    }

    /// Steps the algorithm with an already computed plasticity value.
    pub fn observe(&mut self, plasticity: f64, current_lr: f64) -> Evaluation {
        if self.state.stage != Stage::KnowledgeGuided || !self.can_freeze_more() {
            return self.lr_only(current_lr);
        }
        let module = self.state.frontmost_active;
        let window = self.state.window;
        let h = &mut self.history.modules[module];
        let smoothed = smooth_plasticity(h, plasticity, window);
        h.smoothed.push(smoothed);
        let slope = window_linear_fit(&h.smoothed, window).ok();
        if let Some(s) = slope {
            h.slopes.push(s);
            if h.tolerance.is_none() {
                h.tolerance =
                    init_tolerance(h, self.params.tolerance_coeff, self.params.tolerance_floor);
            }
        }
        let tolerance = h.tolerance;
        match (slope, tolerance) {
            (Some(s), Some(t)) if s.abs() < t => self.state.stale_counter += 1,
            _ => self.state.stale_counter = 0,
        }

        let mut decision = Decision::None;
        if self.state.stale_counter >= self.state.window {
            decision = Decision::Freeze {
                module,
                slope: slope.unwrap_or(0.0),
                tolerance: tolerance.unwrap_or(0.0),
            };
            if self.state.lr_at_frontmost_freeze.is_none() {
                self.state.lr_at_frontmost_freeze = Some(current_lr);
            }
            self.state.frontmost_active += 1;
            self.state.stale_counter = 0;
        }
        let unfreeze = self.lr_unfreeze_check(current_lr);
        if !unfreeze.is_none() {
            decision = unfreeze;
        }
        let stale_counter = self.state.stale_counter;
        Evaluation {
            module,
            plasticity: Some(plasticity),
            smoothed: Some(smoothed),
            slope,
            tolerance,
            stale_counter,
            decision,
        }
    }

    /// Evaluation when no plasticity can be tracked (all but the last module frozen).
    pub fn lr_only(&mut self, current_lr: f64) -> Evaluation {
        let module = self.state.frontmost_active;
        let decision = self.lr_unfreeze_check(current_lr);
        Evaluation {
            module,
            plasticity: None,
            smoothed: None,
            slope: None,
            tolerance: self.history.modules.get(module).and_then(|h| h.tolerance),
            stale_counter: self.state.stale_counter,
            decision,
        }
    }

    /// Unfreezes everything once the LR has dropped by `lr_unfreeze_factor` since
    /// the frontmost freeze, halving the window for refreezing.
    pub fn lr_unfreeze_check(&mut self, current_lr: f64) -> Decision {
        if self.state.frontmost_active == 0 {
            return Decision::None;
        }
        let triggered = match self.state.lr_at_frontmost_freeze {
            Some(at_freeze) => {
                current_lr <= at_freeze / self.params.lr_unfreeze_factor * (1.0 + LR_COMPARE_SLACK)
            }
            None => false,
        };
        let triggered = triggered
            || match self.custom_unfreeze.as_mut() {
                Some(hook) => hook(&self.state, current_lr),
                None => false,
            };
        if !triggered {
            return Decision::None;
        }
        let from_module = self.state.frontmost_active;
        self.state.frontmost_active = 0;
        self.state.stale_counter = 0;
        self.state.window = (self.state.window / 2).max(1);
        self.state.lr_at_frontmost_freeze = None;
        for h in &mut self.history.modules {
            h.reset_series();
        }
        Decision::UnfreezeAll { from_module }
    }
}
