//! Pooled empirical quantile mapping of NWP precipitation onto observations.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::RainGrid;

pub const DEFAULT_QUANTILES: usize = 1001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMModel {
    pub source_quantiles: Vec<f64>,
    pub target_quantiles: Vec<f64>,
}

/// Linear-interpolated empirical quantile of sorted data at probability `p`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Matches `grid_size` evenly spaced quantiles of the two pools.
pub fn fit_qm(forecast: &[f64], observed: &[f64], grid_size: usize) -> Result<QMModel> {
    if forecast.is_empty() || observed.is_empty() {
        return Err(Error::Empty("quantile mapping training pool".into()));
    }
    if grid_size < 2 {
        return Err(Error::Config("quantile grid needs at least 2 points".into()));
    }
    if forecast.iter().chain(observed).any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite value in quantile mapping pool".into()));
    }
    let mut f = forecast.to_vec();
    let mut o = observed.to_vec();
    f.sort_by(f64::total_cmp);
    o.sort_by(f64::total_cmp);
    let probs = (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64);
    let (source_quantiles, target_quantiles) = probs.map(|p| (quantile(&f, p), quantile(&o, p))).unzip();
    Ok(QMModel {
        source_quantiles,
        target_quantiles,
    })
}

/// Fits on the NWP precipitation channel against target rain of `samples`.
pub fn fit_qm_samples(samples: &[&Sample], grid_size: usize) -> Result<QMModel> {
    let forecast: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.nwp_precipitation().values().to_vec())
        .collect();
    let observed: Vec<f64> = samples.iter().flat_map(|s| s.target_rain.values().to_vec()).collect();
    fit_qm(&forecast, &observed, grid_size)
}

impl QMModel {
    /// Maps one value. Inside the source range the map interpolates between
    /// matched quantiles; outside it scales by the outermost quantile ratio.
    pub fn map(&self, x: f64) -> f64 {
        let s = &self.source_quantiles;
        let t = &self.target_quantiles;
        let last = s.len() - 1;
        if x > s[last] {
            return if s[last] > 0.0 { x * t[last] / s[last] } else { t[last] + (x - s[last]) };
        }
        if x < s[0] {
            return if s[0] > 0.0 { x * t[0] / s[0] } else { t[0] - (s[0] - x) };
        }
        let hi = s.partition_point(|&v| v <= x);
        if hi > last {
            return t[last];
        }
        let lo = hi - 1;
        let u = (x - s[lo]) / (s[hi] - s[lo]);
        t[lo] + u * (t[hi] - t[lo])
    }

    pub fn apply(&self, forecast: &RainGrid) -> RainGrid {
        let values = forecast.values().iter().map(|&v| self.map(v).max(0.0)).collect();
        RainGrid::new(forecast.height(), forecast.width(), values).expect("mapped rain is finite and nonnegative")
    }
}

pub fn apply_qm(forecast: &RainGrid, qm: &QMModel) -> RainGrid {
    qm.apply(forecast)
}
