//! Rainfall grids, class thresholds and per-pixel classification.
//!
//! Class bins are left-inclusive: a value equal to a threshold belongs to the
//! higher class, so with the default schema `[0.1, 3, 10, 20, 50]` the bins are
//! `[0, 0.1), [0.1, 3), [3, 10), [10, 20), [20, 50), [50, inf)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default rainfall thresholds in mm per 6 h.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 3.0, 10.0, 20.0, 50.0];

/// Dense 2-D field of accumulated rainfall (mm per 6 h), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RainGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some((idx, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidRain {
                row: idx / width,
                col: idx % width,
                value: v,
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds a grid from raw accumulations, clamping negative values to zero.
    ///
    /// Differenced cumulative fields can dip slightly below zero; the number of
    /// clamped pixels is returned so ingestion can report it. Non-finite values
    /// are still rejected.
    pub fn from_raw_clamped(height: usize, width: usize, mut values: Vec<f64>) -> Result<(Self, usize)> {
        let mut clamped = 0;
        for v in values.iter_mut() {
            if v.is_finite() && *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        let grid = Self::new(height, width, values)?;
        if clamped > 0 {
            log::warn!("clamped {clamped} negative rainfall values to 0");
        }
        Ok((grid, clamped))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::ShapeMismatch {
            expected: "positive height and width".into(),
            actual: format!("{height}x{width}"),
        });
    }
    if height * width != len {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values for {height}x{width}", height * width),
            actual: format!("{len} values"),
        });
    }
    Ok(())
}

/// Ascending rainfall thresholds defining `thresholds.len() + 1` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchema {
    thresholds: Vec<f64>,
    heavy_classes: Vec<usize>,
}

impl Default for ThresholdSchema {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            heavy_classes: vec![4, 5],
        }
    }
}

impl ThresholdSchema {
    pub fn new(thresholds: Vec<f64>, heavy_classes: Vec<usize>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidSchema("no thresholds".into()));
        }
        if let Some(&t) = thresholds.iter().find(|t| !t.is_finite() || **t <= 0.0) {
            return Err(Error::InvalidThreshold(t));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchema(format!(
                "thresholds must be strictly increasing: {thresholds:?}"
            )));
        }
        let num_classes = thresholds.len() + 1;
        if let Some(&k) = heavy_classes.iter().find(|k| **k >= num_classes) {
            return Err(Error::InvalidSchema(format!(
                "heavy class {k} outside [0, {num_classes})"
            )));
        }
        let mut heavy_classes = heavy_classes;
        heavy_classes.sort_unstable();
        heavy_classes.dedup();
        Ok(Self {
            thresholds,
            heavy_classes,
        })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn heavy_classes(&self) -> &[usize] {
        &self.heavy_classes
    }

    pub fn is_heavy(&self, class: usize) -> bool {
        self.heavy_classes.contains(&class)
    }

    /// Boolean lookup table over classes, `true` for heavy classes.
    pub fn heavy_mask(&self) -> Vec<bool> {
        (0..self.num_classes()).map(|k| self.is_heavy(k)).collect()
    }

    /// Class index of a single value: the number of thresholds `<= value`.
    pub fn class_of(&self, value: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= value)
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassField {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassField {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        check_dims(height, width, labels.len())?;
        if let Some(&l) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l.into(),
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixels whose class is at least `min_class`.
    pub fn at_least(&self, min_class: usize) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .labels
                .iter()
                .map(|&l| usize::from(l) >= min_class)
                .collect(),
        }
    }
}

/// Binary event mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

pub fn classify(rain: &RainGrid, schema: &ThresholdSchema) -> ClassField {
    let labels = rain
        .values
        .iter()
        .map(|&v| schema.class_of(v) as u8)
        .collect();
    ClassField {
        height: rain.height,
        width: rain.width,
        labels,
    }
}

/// `mask[i, j]` is set iff `field[i, j] >= threshold`.
pub fn event_mask(field: &RainGrid, threshold: f64) -> Result<Mask> {
    if !threshold.is_finite() || threshold <= 0.0 {
        return Err(Error::InvalidThreshold(threshold));
    }
    Ok(Mask {
        height: field.height,
        width: field.width,
        data: field.values.iter().map(|&v| v >= threshold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_class(value: f64, thresholds: &[f64]) -> usize {
        let mut class = 0;
        for (k, &t) in thresholds.iter().enumerate() {
            if value >= t {
                class = k + 1;
            }
        }
        class
    }

    #[test]
    fn classify_spot_values() {
        let schema = ThresholdSchema::default();
        let rain = RainGrid::new(1, 3, vec![0.0, 75.0, 20.0]).unwrap();
        let classes = classify(&rain, &schema);
        assert_eq!(classes.labels(), &[0, 5, 4]);
        assert_eq!(reference_class(20.0, schema.thresholds()), 4);
        for &v in &[0.0, 0.1, 2.999, 3.0, 10.0, 19.99, 20.0, 49.9, 50.0, 1e4] {
            assert_eq!(schema.class_of(v), reference_class(v, schema.thresholds()), "{v}");
        }
    }

    #[test]
    fn negative_or_nan_rain_names_pixel() {
        let err = RainGrid::new(2, 2, vec![0.0, 1.0, -0.5, 2.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidRain { row: 1, col: 0, .. }), "{err}");
        let err = RainGrid::new(1, 2, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidRain { row: 0, col: 1, .. }));
    }

    #[test]
    fn clamped_ingestion_counts_negatives() {
        let (grid, n) = RainGrid::from_raw_clamped(1, 3, vec![-0.2, 1.0, -1e-9]).unwrap();
        assert_eq!(n, 2);
        assert_eq!(grid.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn event_mask_examples() {
        let zeros = RainGrid::zeros(3, 3);
        assert_eq!(event_mask(&zeros, 0.1).unwrap().count(), 0);
        let flat = RainGrid::new(2, 2, vec![10.0; 4]).unwrap();
        assert_eq!(event_mask(&flat, 10.0).unwrap().count(), 4);
        let g = RainGrid::new(2, 2, vec![0.05, 0.2, 10.0, 49.9]).unwrap();
        assert_eq!(event_mask(&g, 10.0).unwrap().data(), &[false, false, true, true]);
        assert!(event_mask(&g, f64::NAN).is_err());
        assert!(event_mask(&g, f64::INFINITY).is_err());
    }

    #[test]
    fn schema_validation() {
        assert!(ThresholdSchema::new(vec![1.0, 1.0], vec![]).is_err());
        assert!(ThresholdSchema::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(ThresholdSchema::new(vec![-1.0, 2.0], vec![]).is_err());
        let s = ThresholdSchema::new(vec![1.0, 2.0], vec![2]).unwrap();
        assert_eq!(s.num_classes(), 3);
        assert_eq!(s.heavy_mask(), vec![false, false, true]);
    }

    proptest! {
        #[test]
        fn mask_matches_class_cut(values in prop::collection::vec(0.0f64..120.0, 16)) {
            let schema = ThresholdSchema::default();
            let rain = RainGrid::new(4, 4, values).unwrap();
            let classes = classify(&rain, &schema);
            for (k, &t) in schema.thresholds().iter().enumerate() {
                let mask = event_mask(&rain, t).unwrap();
                prop_assert_eq!(mask, classes.at_least(k + 1));
            }
        }

        #[test]
        fn classify_is_monotone(v in 0.0f64..200.0, bump in 0.0f64..50.0) {
            let schema = ThresholdSchema::default();
            prop_assert!(schema.class_of(v + bump) >= schema.class_of(v));
        }
    }
}
