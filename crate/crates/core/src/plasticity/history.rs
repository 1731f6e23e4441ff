//! Per-module plasticity series: smoothing, windowed slope, tolerance.

use thiserror::Error;

/// Slope could not be fitted from fewer than two points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("at least two points are needed for a slope")]
pub struct InsufficientData;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModuleHistory {
    pub raw: Vec<f64>,
    /// Smoothed values, one per raw value.
    pub smoothed: Vec<f64>,
    /// Every slope fitted so far, in order.
    pub slopes: Vec<f64>,
    pub tolerance: Option<f64>,
}

impl ModuleHistory {
    pub fn slope_readings(&self) -> usize {
        self.slopes.len()
    }

    /// Drops the series but keeps the tolerance and the slope readings it came from.
    pub fn reset_series(&mut self) {
        self.raw.clear();
        self.smoothed.clear();
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlasticityHistory {
    pub modules: Vec<ModuleHistory>,
}

impl PlasticityHistory {
    pub fn new(num_modules: usize) -> Self {
        PlasticityHistory {
            modules: vec![ModuleHistory::default(); num_modules],
        }
    }

    pub fn module(&self, index: usize) -> &ModuleHistory {
        &self.modules[index]
    }
}

/// Appends `p` to the raw series and returns the mean of the most recent
/// `min(count, window)` raw values.
pub fn smooth_plasticity(history: &mut ModuleHistory, p: f64, window: usize) -> f64 {
    history.raw.push(p);
    let take = history.raw.len().min(window.max(1));
    let tail = &history.raw[history.raw.len() - take..];
    tail.iter().sum::<f64>() / take as f64
}

/// Ordinary least-squares slope of the last `min(len, window)` points against
/// `x = 0, 1, 2, …`.
pub fn window_linear_fit(series: &[f64], window: usize) -> Result<f64, InsufficientData> {
    let take = series.len().min(window);
    if take < 2 {
        return Err(InsufficientData);
    }
    let ys = &series[series.len() - take..];
    let n = take as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        cov += dx * (y - y_mean);
        var += dx * dx;
    }
    Ok(cov / var)
}

/// `coeff × max |slope|` over the first three slope readings, never below `floor`.
/// Returns `None` until three readings exist.
pub fn init_tolerance(history: &ModuleHistory, coeff: f64, floor: f64) -> Option<f64> {
    if history.slopes.len() < 3 {
        return None;
    }
    let max = history.slopes[..3]
        .iter()
        .fold(0.0f64, |m, s| m.max(s.abs()));
    Some((coeff * max).max(floor))
}
