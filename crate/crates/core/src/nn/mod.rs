//! Layers, modules, losses and optimizers.

pub mod flops;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod zoo;

pub use flops::{count_flops, frozen_forward_fraction, module_forward_flops, FlopCount};
pub use gradcheck::{finite_diff_check, finite_diff_check_loss, finite_diff_check_with_input};
pub use layer::{Layer, LayerKind, Mode};
pub use loss::softmax_cross_entropy;
pub use model::{argmax_rows, LayerModule, Model};
pub use optim::{sgd_step, step_decay_lr, LrSchedule, LrScheduleKind};
pub use param::Parameter;
pub use zoo::{mlp, mlp_groups, mlp_layers, toy_cnn, toy_cnn_groups, toy_cnn_layers};
