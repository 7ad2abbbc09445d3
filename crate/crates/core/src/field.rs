//! Per-pixel class score volumes laid out as `[class, row, col]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ClassField;

/// Raw per-pixel class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsField {
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Softmax-normalized per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbField {
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

macro_rules! volume_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(num_classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if num_classes == 0 || height == 0 || width == 0 {
                    return Err(Error::ShapeMismatch {
                        expected: "positive dimensions".into(),
                        actual: format!("{num_classes}x{height}x{width}"),
                    });
                }
                if data.len() != num_classes * height * width {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}", num_classes * height * width),
                        actual: format!("{}", data.len()),
                    });
                }
                Ok(Self {
                    num_classes,
                    height,
                    width,
                    data,
                })
            }

            pub fn zeros(num_classes: usize, height: usize, width: usize) -> Self {
                Self {
                    num_classes,
                    height,
                    width,
                    data: vec![0.0; num_classes * height * width],
                }
            }

            pub fn num_classes(&self) -> usize {
                self.num_classes
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            #[inline]
            pub fn at(&self, class: usize, pixel: usize) -> f64 {
                self.data[class * self.pixels() + pixel]
            }

            pub fn same_shape<T: HasShape>(&self, other: &T) -> bool {
                (self.num_classes, self.height, self.width) == other.shape3()
            }

            /// Per-pixel argmax with ties resolved to the lower class.
            pub fn argmax(&self) -> ClassField {
                let n = self.pixels();
                let labels = (0..n)
                    .map(|p| {
                        let mut best = 0;
                        let mut best_v = self.data[p];
                        for k in 1..self.num_classes {
                            let v = self.data[k * n + p];
                            if v > best_v {
                                best = k;
                                best_v = v;
                            }
                        }
                        best as u8
                    })
                    .collect();
                ClassField::new(self.height, self.width, labels, self.num_classes)
                    .expect("argmax labels are in range")
            }
        }

        impl HasShape for $ty {
            fn shape3(&self) -> (usize, usize, usize) {
                (self.num_classes, self.height, self.width)
            }
        }
    };
}

pub trait HasShape {
    fn shape3(&self) -> (usize, usize, usize);
}

volume_common!(LogitsField);
volume_common!(ProbField);

impl LogitsField {
    /// Numerically stable softmax over the class axis.
    pub fn softmax(&self) -> ProbField {
        let n = self.pixels();
        let c = self.num_classes;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            let max = (0..c).map(|k| self.data[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (self.data[k * n + p] - max).exp();
                out[k * n + p] = e;
                sum += e;
            }
            for k in 0..c {
                out[k * n + p] /= sum;
            }
        }
        ProbField {
            num_classes: c,
            height: self.height,
            width: self.width,
            data: out,
        }
    }
}

impl ProbField {
    /// Fails if any pixel's probabilities sum more than `tol` away from 1.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let n = self.pixels();
        for p in 0..n {
            let sum: f64 = (0..self.num_classes).map(|k| self.data[k * n + p]).sum();
            if !sum.is_finite() || (sum - 1.0).abs() > tol {
                return Err(Error::Unnormalized { pixel: p, sum });
            }
        }
        Ok(())
    }

    /// One-hot probabilities for a label field.
    pub fn one_hot(labels: &ClassField, num_classes: usize) -> Self {
        let n = labels.len();
        let mut data = vec![0.0; num_classes * n];
        for (p, &l) in labels.labels().iter().enumerate() {
            data[usize::from(l) * n + p] = 1.0;
        }
        Self {
            num_classes,
            height: labels.height(),
            width: labels.width(),
            data,
        }
    }
}
