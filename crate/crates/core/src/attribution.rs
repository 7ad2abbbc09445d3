//! Integrated Gradients over a flattened input and channel importance
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::data::{CHANNEL_NAMES, NUM_CHANNELS, PRESSURE_LEVEL_CHANNELS};
use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 50;

/// Midpoint Riemann approximation of the path integral from `baseline` (zero
/// when `None`) to `x`:
/// `IG_i = (x_i - x'_i) * mean_k grad_i(x' + (k - 1/2)/m * (x - x'))`.
///
/// `grad` returns the gradient of the scalar model output at a point.
pub fn integrated_gradients<F>(x: &[f64], baseline: Option<&[f64]>, steps: usize, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs steps >= 1".into()));
    }
    let zeros;
    let base = match baseline {
        Some(b) if b.len() != x.len() => {
            return Err(Error::ShapeMismatch {
                expected: format!("{} baseline values", x.len()),
                actual: format!("{}", b.len()),
            })
        }
        Some(b) => b,
        None => {
            zeros = vec![0.0; x.len()];
            &zeros
        }
    };
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 0..steps {
        let a = (k as f64 + 0.5) / steps as f64;
        for ((p, &xi), &bi) in point.iter_mut().zip(x).zip(base) {
            *p = bi + a * (xi - bi);
        }
        let g = grad(&point)?;
        if g.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient values", x.len()),
                actual: format!("{}", g.len()),
            });
        }
        acc.iter_mut().zip(&g).for_each(|(s, gi)| *s += gi);
    }
    Ok(acc
        .iter()
        .zip(x)
        .zip(base)
        .map(|((s, xi), bi)| (xi - bi) * s / steps as f64)
        .collect())
}

/// Sums a `[channel, pixel]` attribution into one value per channel.
pub fn channel_sums(attr: &[f64], channels: usize) -> Vec<f64> {
    let n = attr.len() / channels;
    attr.chunks(n).map(|c| c.iter().sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    AllPixels,
    HeavyPixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub channel: String,
    pub mean_abs: f64,
    /// Normalized over the pressure-level channels; `None` for surface fields.
    pub pressure_level: Option<f64>,
    /// Normalized over all channels.
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub samples: usize,
    pub channels: Vec<ChannelImportance>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        log::warn!("all attributions are zero; normalized importances set to 0");
        vec![0.0; v.len()]
    }
}

/// Mean absolute channel attribution over samples plus the two normalized
/// views.
pub fn aggregate_importance(per_sample: &[Vec<f64>]) -> Result<Importance> {
    if per_sample.is_empty() {
        return Err(Error::Empty("no attributed samples".into()));
    }
    if let Some(v) = per_sample.iter().find(|v| v.len() != NUM_CHANNELS) {
        return Err(Error::ChannelMismatch {
            expected: NUM_CHANNELS,
            actual: v.len(),
        });
    }
    let n = per_sample.len() as f64;
    let mut mean_abs = vec![0.0; NUM_CHANNELS];
    for v in per_sample {
        mean_abs.iter_mut().zip(v).for_each(|(m, x)| *m += x.abs() / n);
    }
    let full = normalize(&mean_abs);
    let pressure = normalize(&mean_abs[..PRESSURE_LEVEL_CHANNELS]);
    let channels = (0..NUM_CHANNELS)
        .map(|c| ChannelImportance {
            channel: CHANNEL_NAMES[c].to_string(),
            mean_abs: mean_abs[c],
            pressure_level: pressure.get(c).copied(),
            full: full[c],
        })
        .collect();
    Ok(Importance {
        samples: per_sample.len(),
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_exact() {
        let w = [0.5, -2.0, 3.0, 0.0];
        let x = [1.0, 2.0, -1.5, 7.0];
        for steps in [1, 3, 50] {
            let ig = integrated_gradients(&x, None, steps, |_| Ok(w.to_vec())).unwrap();
            for i in 0..4 {
                assert!((ig[i] - w[i] * x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_model_and_zero_input() {
        let ig = integrated_gradients(&[1.0, 2.0], None, 10, |_| Ok(vec![0.0, 0.0])).unwrap();
        assert_eq!(ig, vec![0.0, 0.0]);
        let ig = integrated_gradients(&[0.0, 0.0], None, 10, |p| Ok(vec![p[0].cos(), 1.0])).unwrap();
        assert_eq!(ig, vec![0.0, 0.0]);
    }

    #[test]
    fn nonlinear_completeness() {
        // f(x) = sin(x0) * x1 + x2^3
        let f = |p: &[f64]| p[0].sin() * p[1] + p[2].powi(3);
        let g = |p: &[f64]| Ok(vec![p[0].cos() * p[1], p[0].sin(), 3.0 * p[2] * p[2]]);
        let x = [0.8, -1.3, 0.6];
        let ig = integrated_gradients(&x, None, 256, g).unwrap();
        let total: f64 = ig.iter().sum();
        let expect = f(&x) - f(&[0.0; 3]);
        assert!(((total - expect) / expect).abs() < 1e-3);
    }

    #[test]
    fn importance_views() {
        let mut v = vec![0.0; NUM_CHANNELS];
        v[5] = -3.0;
        let imp = aggregate_importance(&[v.clone()]).unwrap();
        assert_eq!(imp.channels[5].full, 1.0);
        assert_eq!(imp.channels[5].pressure_level, Some(1.0));
        assert_eq!(imp.channels[23].pressure_level, None);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let both = aggregate_importance(&[v, neg]).unwrap();
        assert_eq!(both.channels[5].mean_abs, 3.0);
        assert!(aggregate_importance(&[]).is_err());
    }
}
