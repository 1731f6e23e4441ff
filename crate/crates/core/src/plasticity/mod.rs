//! Training-plasticity measurement and the freeze/unfreeze controller.

pub mod controller;
pub mod history;
pub mod sp_loss;

pub use controller::{
    ControllerParams, Decision, Evaluation, FreezeState, PlasticityController, Stage, UnfreezeHook,
};
pub use history::{
    init_tolerance, smooth_plasticity, window_linear_fit, InsufficientData, ModuleHistory,
    PlasticityHistory,
};
pub use sp_loss::{normalized_gram, sp_loss};
