//! Samples, predictor stacks and their normalization.

mod archive;
mod split;
mod synth;

pub use archive::{load_archive, load_dataset, save_archive, save_dataset, DatasetIndex, ShardEntry, INDEX_FILE};
pub use split::{split_by_period, DatasetSplit, PeriodBoundaries};
pub use synth::{generate_synthetic, gaussian_blur, SynthConfig, YearCount, INFORMATIVE_TRANSFORMS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{classify, ClassField, RainGrid, ThresholdSchema};

/// Number of predictor channels.
pub const NUM_CHANNELS: usize = 27;

/// Canonical channel order: five variables at 500/700/850/925 hPa followed by
/// seven surface fields.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "T500", "T700", "T850", "T925", //
    "Z500", "Z700", "Z850", "Z925", //
    "U500", "U700", "U850", "U925", //
    "V500", "V700", "V850", "V925", //
    "Q500", "Q700", "Q850", "Q925", //
    "T2M", "U10", "V10", "TP", "TCW", "CAPE", "MSLP",
];

/// Number of leading pressure-level channels in [`CHANNEL_NAMES`].
pub const PRESSURE_LEVEL_CHANNELS: usize = 20;

/// Index of the NWP total-precipitation channel.
pub const TP_CHANNEL: usize = 23;

pub const LEAD_HOURS: [u32; 4] = [6, 12, 18, 24];

/// `[channel, row, col]` predictor tensor for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PredictorStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != NUM_CHANNELS {
            return Err(Error::ChannelMismatch {
                expected: NUM_CHANNELS,
                actual: channels,
            });
        }
        if data.len() != channels * height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite predictor value at flat index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_names(&self) -> &'static [&'static str; NUM_CHANNELS] {
        &CHANNEL_NAMES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub predictors: PredictorStack,
    pub target_rain: RainGrid,
    pub target_class: ClassField,
    /// Valid time, ISO-8601 UTC.
    pub timestamp: String,
    pub lead_hours: u32,
}

impl Sample {
    pub fn new(
        predictors: PredictorStack,
        target_rain: RainGrid,
        schema: &ThresholdSchema,
        timestamp: String,
        lead_hours: u32,
    ) -> Result<Self> {
        if predictors.height() != target_rain.height() || predictors.width() != target_rain.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", predictors.height(), predictors.width()),
                actual: format!("{}x{}", target_rain.height(), target_rain.width()),
            });
        }
        let target_class = classify(&target_rain, schema);
        Ok(Self {
            predictors,
            target_rain,
            target_class,
            timestamp,
            lead_hours,
        })
    }

    /// The NWP precipitation channel as a rainfall grid, negatives clamped.
    pub fn nwp_precipitation(&self) -> RainGrid {
        let (grid, _) = RainGrid::from_raw_clamped(
            self.predictors.height(),
            self.predictors.width(),
            self.predictors.channel(TP_CHANNEL).to_vec(),
        )
        .expect("predictor values are finite");
        grid
    }
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fits per-channel mean and population std over every pixel of `samples`.
pub fn fit_normalization(samples: &[&Sample]) -> Result<NormalizationStats> {
    if samples.len() < 2 {
        return Err(Error::Empty("normalization needs at least 2 samples".into()));
    }
    let channels = samples[0].predictors.channels();
    let mut mean = vec![0.0; channels];
    let mut count = 0usize;
    for s in samples {
        if s.predictors.channels() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                actual: s.predictors.channels(),
            });
        }
        for (c, m) in mean.iter_mut().enumerate() {
            *m += s.predictors.channel(c).iter().sum::<f64>();
        }
        count += s.predictors.height() * s.predictors.width();
    }
    let n = count as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for s in samples {
        for (c, v) in var.iter_mut().enumerate() {
            *v += s
                .predictors
                .channel(c)
                .iter()
                .map(|x| (x - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(channels);
    for (c, v) in var.into_iter().enumerate() {
        let sd = (v / n).sqrt();
        if !(sd > 1e-12 * mean[c].abs().max(1.0)) {
            return Err(Error::ZeroVariance {
                index: c,
                name: CHANNEL_NAMES.get(c).copied().unwrap_or("?").to_string(),
            });
        }
        std.push(sd);
    }
    Ok(NormalizationStats { mean, std })
}

pub fn apply_normalization(stack: &PredictorStack, stats: &NormalizationStats) -> Result<PredictorStack> {
    if stats.channels() != stack.channels() {
        return Err(Error::ChannelMismatch {
            expected: stats.channels(),
            actual: stack.channels(),
        });
    }
    let n = stack.height * stack.width;
    let data = stack
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / n;
            (x - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Ok(PredictorStack {
        data,
        ..stack.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_with(fill: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> PredictorStack {
        let mut data = Vec::new();
        for c in 0..NUM_CHANNELS {
            for p in 0..h * w {
                data.push(fill(c, p));
            }
        }
        PredictorStack::new(NUM_CHANNELS, h, w, data).unwrap()
    }

    fn sample(stack: PredictorStack) -> Sample {
        let (h, w) = (stack.height(), stack.width());
        Sample::new(
            stack,
            RainGrid::zeros(h, w),
            &ThresholdSchema::default(),
            "2007-01-01T06:00:00Z".into(),
            6,
        )
        .unwrap()
    }

    #[test]
    fn channel_table_layout() {
        assert_eq!(CHANNEL_NAMES[TP_CHANNEL], "TP");
        assert_eq!(CHANNEL_NAMES[PRESSURE_LEVEL_CHANNELS], "T2M");
        let mut names = CHANNEL_NAMES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), NUM_CHANNELS);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let a = sample(stack_with(|c, p| if c == 3 { 5.0 } else { (c + p) as f64 }, 2, 2));
        let b = sample(stack_with(|c, p| if c == 3 { 5.0 } else { (c * p) as f64 }, 2, 2));
        match fit_normalization(&[&a, &b]) {
            Err(Error::ZeroVariance { index, name }) => {
                assert_eq!(index, 3);
                assert_eq!(name, "T925");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_point_distribution_population_std() {
        let a = sample(stack_with(|_, p| if p % 2 == 0 { 0.0 } else { 2.0 }, 2, 2));
        let b = sample(stack_with(|_, p| if p % 2 == 0 { 2.0 } else { 0.0 }, 2, 2));
        let stats = fit_normalization(&[&a, &b]).unwrap();
        for c in 0..NUM_CHANNELS {
            assert_eq!(stats.mean[c], 1.0);
            assert_eq!(stats.std[c], 1.0);
        }
    }

    #[test]
    fn normalized_training_data_is_standard() {
        let a = sample(stack_with(|c, p| (c * 7 + p * p) as f64 * 0.37, 3, 3));
        let b = sample(stack_with(|c, p| ((c + 1) * p) as f64 - 4.0, 3, 3));
        let stats = fit_normalization(&[&a, &b]).unwrap();
        let na = apply_normalization(&a.predictors, &stats).unwrap();
        let nb = apply_normalization(&b.predictors, &stats).unwrap();
        for c in 0..NUM_CHANNELS {
            let vals: Vec<f64> = na.channel(c).iter().chain(nb.channel(c)).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "channel {c}: {m} {s}");
        }
    }

    #[test]
    fn apply_examples() {
        let st = stack_with(|_, _| 3.0, 2, 2);
        let id = apply_normalization(&st, &NormalizationStats::identity(NUM_CHANNELS)).unwrap();
        assert_eq!(id, st);
        let stats = NormalizationStats {
            mean: vec![1.0; NUM_CHANNELS],
            std: vec![2.0; NUM_CHANNELS],
        };
        let out = apply_normalization(&st, &stats).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        let centered = apply_normalization(
            &st,
            &NormalizationStats {
                mean: vec![3.0; NUM_CHANNELS],
                std: vec![0.5; NUM_CHANNELS],
            },
        )
        .unwrap();
        assert!(centered.data().iter().all(|&v| v == 0.0));
        let short = NormalizationStats::identity(5);
        assert!(matches!(
            apply_normalization(&st, &short),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn stats_independent_of_sample_order() {
        let samples: Vec<Sample> = (0..6)
            .map(|i| sample(stack_with(|c, p| ((i * 31 + c * 17 + p * 13) % 23) as f64 * 0.1 + i as f64, 4, 4)))
            .collect();
        let fwd: Vec<&Sample> = samples.iter().collect();
        let rev: Vec<&Sample> = samples.iter().rev().collect();
        let a = fit_normalization(&fwd).unwrap();
        let b = fit_normalization(&rev).unwrap();
        for c in 0..NUM_CHANNELS {
            assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            assert!((a.std[c] - b.std[c]).abs() < 1e-12);
        }
    }
}
