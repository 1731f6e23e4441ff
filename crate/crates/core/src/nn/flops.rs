//! Analytic FLOP accounting.
//!
//! Forward cost per layer: dense `2·in·out·b`, conv `2·k²·c_in·c_out·h_out·w_out·b`;
//! other layer kinds are not counted. Backward is charged at twice the forward cost
//! for every module at or above the freeze boundary.

use crate::error::Result;
use crate::nn::model::Model;
use crate::scalar::Scalar;

pub const BACKWARD_TO_FORWARD: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub forward: u64,
    pub backward: u64,
}

/// Forward FLOPs of each module for a batch of `batch_size`.
pub fn module_forward_flops<T: Scalar>(model: &Model<T>, batch_size: usize) -> Result<Vec<u64>> {
    let shapes = model.module_input_shapes(batch_size)?;
    model
        .modules()
        .iter()
        .zip(&shapes)
        .map(|(m, s)| m.forward_flops(s))
        .collect()
}

/// FLOPs of one iteration with modules `< frontmost_active` frozen. When
/// `prefix_cached` is set the frozen prefix's forward pass is skipped too.
pub fn count_flops<T: Scalar>(
    model: &Model<T>,
    frontmost_active: usize,
    batch_size: usize,
    prefix_cached: bool,
) -> Result<FlopCount> {
    let per_module = module_forward_flops(model, batch_size)?;
    let boundary = frontmost_active.min(per_module.len());
    let active: u64 = per_module[boundary..].iter().sum();
    let prefix: u64 = per_module[..boundary].iter().sum();
    Ok(FlopCount {
        forward: if prefix_cached {
            active
        } else {
            active + prefix
        },
        backward: BACKWARD_TO_FORWARD * active,
    })
}

/// Share of forward FLOPs spent in the first `frontmost_active` modules.
pub fn frozen_forward_fraction<T: Scalar>(
    model: &Model<T>,
    frontmost_active: usize,
) -> Result<f64> {
    let per_module = module_forward_flops(model, 1)?;
    let total: u64 = per_module.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let boundary = frontmost_active.min(per_module.len());
    Ok(per_module[..boundary].iter().sum::<u64>() as f64 / total as f64)
}
