//! Synthetic long-tailed rainfall datasets.
//!
//! Each sample draws a spatially smooth base field with gamma marginals (a
//! smoothed Gaussian latent field rank-matched onto sorted gamma draws), adds a
//! Poisson number of Gaussian storm blobs, and derives predictors from the
//! resulting rain field through fixed transforms plus Gaussian noise. Channel
//! `c` carries transform `c % 8`; the transform landing on the TP channel is an
//! NWP-like smoothed and damped copy of the rain in mm.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{PredictorStack, Sample, LEAD_HOURS, NUM_CHANNELS, TP_CHANNEL};
use crate::error::{Error, Result};
use crate::grid::{RainGrid, ThresholdSchema};

/// Number of distinct predictor transforms cycled over the 27 channels.
pub const INFORMATIVE_TRANSFORMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearCount {
    pub year: i32,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    /// Expected number of storm blobs per sample.
    pub blob_rate: f64,
    /// Mean blob peak in mm per 6 h.
    pub blob_intensity: f64,
    /// Mean blob Gaussian radius in pixels.
    pub blob_radius: f64,
    /// Correlation length of the base field in pixels.
    pub smoothness: f64,
    /// Std of the Gaussian noise added to every predictor.
    pub noise_level: f64,
    pub seed: u64,
    /// Samples per calendar year, in chronological order. Empty spreads
    /// `num_samples` evenly over 2007-2012.
    pub calendar: Vec<YearCount>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2800,
            height: 32,
            width: 32,
            gamma_shape: 0.2,
            gamma_scale: 0.5,
            blob_rate: 1.5,
            blob_intensity: 45.0,
            blob_radius: 2.0,
            smoothness: 2.0,
            noise_level: 0.3,
            seed: 20070101,
            calendar: vec![
                YearCount { year: 2007, samples: 500 },
                YearCount { year: 2008, samples: 500 },
                YearCount { year: 2009, samples: 500 },
                YearCount { year: 2010, samples: 500 },
                YearCount { year: 2011, samples: 400 },
                YearCount { year: 2012, samples: 400 },
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "synthetic grid {}x{} is degenerate (needs at least 8x8)",
                self.height, self.width
            )));
        }
        let positive = [
            ("gamma_shape", self.gamma_shape),
            ("gamma_scale", self.gamma_scale),
            ("blob_intensity", self.blob_intensity),
            ("blob_radius", self.blob_radius),
            ("smoothness", self.smoothness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.blob_rate >= 0.0) || !(self.noise_level >= 0.0) {
            return Err(Error::Config("blob_rate and noise_level must be >= 0".into()));
        }
        if !self.calendar.is_empty() {
            let total: usize = self.calendar.iter().map(|y| y.samples).sum();
            if total != self.num_samples {
                return Err(Error::Config(format!(
                    "calendar holds {total} samples but num_samples is {}",
                    self.num_samples
                )));
            }
            if self.calendar.windows(2).any(|w| w[0].year >= w[1].year) {
                return Err(Error::Config("calendar years must be increasing".into()));
            }
        }
        Ok(())
    }

    fn timeline(&self) -> Vec<YearCount> {
        if !self.calendar.is_empty() {
            return self.calendar.clone();
        }
        let years: Vec<i32> = (2007..=2012).collect();
        let base = self.num_samples / years.len();
        let extra = self.num_samples % years.len();
        years
            .iter()
            .enumerate()
            .map(|(i, &year)| YearCount {
                year,
                samples: base + usize::from(i < extra),
            })
            .collect()
    }
}

pub fn generate_synthetic(config: &SynthConfig, schema: &ThresholdSchema) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.num_samples);
    let mut index = 0u64;
    for yc in config.timeline() {
        let max_per_year = 4 * 365;
        if yc.samples > max_per_year {
            return Err(Error::Config(format!(
                "{} samples in {} exceeds the 6-hourly slots of a year",
                yc.samples, yc.year
            )));
        }
        let start = NaiveDate::from_ymd_opt(yc.year, 1, 1)
            .ok_or_else(|| Error::Config(format!("bad year {}", yc.year)))?
            .and_hms_opt(0, 0, 0)
            .expect("midnight");
        for k in 0..yc.samples {
            let lead = LEAD_HOURS[k % LEAD_HOURS.len()];
            let valid = start + Duration::hours(6 * k as i64 + 6);
            let timestamp = valid.format("%Y-%m-%dT%H:%M:%SZ").to_string();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(index);
            out.push(synth_sample(config, schema, &mut rng, timestamp, lead)?);
            index += 1;
        }
    }
    Ok(out)
}

fn to_f32_exact(v: f64) -> f64 {
    f64::from(v as f32)
}

fn synth_sample(
    config: &SynthConfig,
    schema: &ThresholdSchema,
    rng: &mut ChaCha8Rng,
    timestamp: String,
    lead_hours: u32,
) -> Result<Sample> {
    let (h, w) = (config.height, config.width);
    let n = h * w;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Base field: smooth latent ranks mapped onto sorted gamma draws.
    let latent: Vec<f64> = (0..n).map(|_| std_normal.sample(rng)).collect();
    let latent = gaussian_blur(&latent, h, w, config.smoothness);
    let gamma = Gamma::new(config.gamma_shape, config.gamma_scale)
        .map_err(|e| Error::Config(format!("gamma: {e}")))?;
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    draws.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
    let mut rain = vec![0.0; n];
    for (rank, &pix) in order.iter().enumerate() {
        rain[pix] = draws[rank];
    }

    let blobs = if config.blob_rate > 0.0 {
        Poisson::new(config.blob_rate)
            .map_err(|e| Error::Config(format!("poisson: {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    for _ in 0..blobs {
        let cy = rng.random::<f64>() * h as f64;
        let cx = rng.random::<f64>() * w as f64;
        let radius = config.blob_radius * rng.random_range(0.7..1.3);
        let peak = config.blob_intensity * rng.random_range(0.5..1.5);
        let inv = 1.0 / (2.0 * radius * radius);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2);
                rain[i * w + j] += peak * (-d2 * inv).exp();
            }
        }
    }
    let rain: Vec<f64> = rain.into_iter().map(to_f32_exact).collect();

    let log_rain: Vec<f64> = rain.iter().map(|r| r.ln_1p()).collect();
    let transforms = predictor_transforms(&rain, &log_rain, h, w);
    let noise = Normal::new(0.0, config.noise_level.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(NUM_CHANNELS * n);
    for c in 0..NUM_CHANNELS {
        let base = &transforms[c % INFORMATIVE_TRANSFORMS];
        for &v in base {
            let mut x = if config.noise_level > 0.0 { v + noise.sample(rng) } else { v };
            if c == TP_CHANNEL {
                x = x.max(0.0);
            }
            data.push(to_f32_exact(x));
        }
    }
    let predictors = PredictorStack::new(NUM_CHANNELS, h, w, data)?;
    let target = RainGrid::new(h, w, rain)?;
    Sample::new(predictors, target, schema, timestamp, lead_hours)
}

fn predictor_transforms(rain: &[f64], log_rain: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    let n = h * w;
    let mut grad_x = vec![0.0; n];
    let mut grad_y = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let l = log_rain[i * w + j.saturating_sub(1)];
            let r = log_rain[i * w + (j + 1).min(w - 1)];
            let u = log_rain[i.saturating_sub(1) * w + j];
            let d = log_rain[(i + 1).min(h - 1) * w + j];
            grad_x[i * w + j] = 0.5 * (r - l);
            grad_y[i * w + j] = 0.5 * (d - u);
        }
    }
    let indicator = |t: f64| rain.iter().map(|&r| f64::from(u8::from(r >= t))).collect::<Vec<_>>();
    let nwp: Vec<f64> = gaussian_blur(rain, h, w, 1.5).into_iter().map(|v| 0.7 * v).collect();
    let transforms = vec![
        log_rain.to_vec(),
        gaussian_blur(log_rain, h, w, 2.0),
        grad_x,
        grad_y,
        gaussian_blur(log_rain, h, w, 4.0),
        indicator(10.0),
        indicator(3.0),
        nwp,
    ];
    debug_assert_eq!(transforms.len(), INFORMATIVE_TRANSFORMS);
    debug_assert_eq!(TP_CHANNEL % INFORMATIVE_TRANSFORMS, 7);
    transforms
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = clamp(j as isize + t as isize - radius, w);
                acc += k * data[i * w + jj];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = clamp(i as isize + t as isize - radius, h);
                acc += k * tmp[ii * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    out
}
