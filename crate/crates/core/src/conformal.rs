//! Class-conditional (Mondrian) conformal prediction sets over pixel-wise
//! class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ProbField;
use crate::grid::ClassField;

/// Conformity scores `1 - p_y` grouped by true class.
pub fn conformity_scores(probs: &[ProbField], labels: &[ClassField]) -> Result<Vec<Vec<f64>>> {
    let c = probs.first().map_or(0, |p| p.num_classes());
    let mut out = vec![Vec::new(); c];
    for (p, l) in probs.iter().zip(labels) {
        if p.num_classes() != c || p.pixels() != l.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{c} classes over {} pixels", l.len()),
                actual: format!("{} classes over {} pixels", p.num_classes(), p.pixels()),
            });
        }
        p.check_normalized(1e-6)?;
        for (i, &y) in l.labels().iter().enumerate() {
            let y = usize::from(y);
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, num_classes: c });
            }
            out[y].push((1.0 - p.at(y, i)).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub q: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `q_k = s_(ceil((1 - alpha)(N_k + 1)))`, or 1 when that rank exceeds `N_k`
/// (including unrepresented classes).
pub fn calibrate(scores_by_class: &[Vec<f64>], alpha: f64) -> Result<ConformalCalibration> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut q = Vec::with_capacity(scores_by_class.len());
    for (k, scores) in scores_by_class.iter().enumerate() {
        let n = scores.len();
        if n == 0 {
            log::warn!("class {k} has no calibration pixels; threshold set to 1");
        }
        let rank = conservative_rank(n, alpha);
        if rank > n {
            q.push(1.0);
            continue;
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        q.push(sorted[rank - 1]);
    }
    Ok(ConformalCalibration {
        alpha,
        q,
        counts: scores_by_class.iter().map(Vec::len).collect(),
    })
}

/// `ceil((1 - alpha)(n + 1))`, robust to float noise at exact integers.
pub fn conservative_rank(n: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * (n + 1) as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Per-pixel class membership, `[pixel][class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub num_classes: usize,
    pub members: Vec<bool>,
}

impl PredictionSet {
    pub fn pixels(&self) -> usize {
        self.members.len() / self.num_classes
    }

    pub fn contains(&self, pixel: usize, class: usize) -> bool {
        self.members[pixel * self.num_classes + class]
    }

    pub fn size(&self, pixel: usize) -> usize {
        self.members[pixel * self.num_classes..(pixel + 1) * self.num_classes]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn empty_count(&self) -> usize {
        (0..self.pixels()).filter(|&p| self.size(p) == 0).count()
    }
}

/// `k` is in the set iff `1 - p_k <= q_k`.
pub fn predict_set(probs: &ProbField, calib: &ConformalCalibration) -> Result<PredictionSet> {
    let c = probs.num_classes();
    if calib.q.len() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", calib.q.len()),
            actual: format!("{c}"),
        });
    }
    let n = probs.pixels();
    let mut members = vec![false; n * c];
    for p in 0..n {
        for k in 0..c {
            members[p * c + k] = 1.0 - probs.at(k, p) <= calib.q[k];
        }
    }
    Ok(PredictionSet { num_classes: c, members })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub pixels: usize,
    pub covered: usize,
    pub set_size_sum: usize,
    pub empty_sets: usize,
    pub per_class_pixels: Vec<usize>,
    pub per_class_covered: Vec<usize>,
}

impl CoverageStats {
    pub fn new(num_classes: usize) -> Self {
        Self {
            per_class_pixels: vec![0; num_classes],
            per_class_covered: vec![0; num_classes],
            ..Self::default()
        }
    }

    pub fn add(&mut self, sets: &PredictionSet, labels: &ClassField) -> Result<()> {
        if sets.pixels() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", labels.len()),
                actual: format!("{}", sets.pixels()),
            });
        }
        for (p, &y) in labels.labels().iter().enumerate() {
            let y = usize::from(y);
            let hit = sets.contains(p, y);
            let size = sets.size(p);
            self.pixels += 1;
            self.covered += usize::from(hit);
            self.set_size_sum += size;
            self.empty_sets += usize::from(size == 0);
            self.per_class_pixels[y] += 1;
            self.per_class_covered[y] += usize::from(hit);
        }
        Ok(())
    }

    /// Marginal coverage over every pixel.
    pub fn picp(&self) -> Option<f64> {
        (self.pixels > 0).then(|| self.covered as f64 / self.pixels as f64)
    }

    pub fn avg_set_size(&self) -> Option<f64> {
        (self.pixels > 0).then(|| self.set_size_sum as f64 / self.pixels as f64)
    }

    pub fn per_class_picp(&self) -> Vec<Option<f64>> {
        self.per_class_pixels
            .iter()
            .zip(&self.per_class_covered)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }

    /// Unweighted mean of the per-class coverages that are defined.
    pub fn mean_class_picp(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_class_picp().into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn picp(sets: &PredictionSet, labels: &ClassField) -> Result<f64> {
    let mut s = CoverageStats::new(sets.num_classes);
    s.add(sets, labels)?;
    s.picp().ok_or_else(|| Error::Empty("no pixels".into()))
}

pub fn avg_set_size(sets: &PredictionSet) -> f64 {
    let n = sets.pixels();
    (0..n).map(|p| sets.size(p)).sum::<usize>() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_examples() {
        let p = ProbField::new(6, 1, 2, vec![1.0 / 6.0, 1.0, 1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0])
            .unwrap();
        let l = ClassField::new(1, 2, vec![3, 0], 6).unwrap();
        let s = conformity_scores(&[p], &[l]).unwrap();
        assert!((s[3][0] - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(s[0], vec![0.0]);
    }

    #[test]
    fn rank_arithmetic() {
        assert_eq!(conservative_rank(19, 0.05), 19);
        assert_eq!(conservative_rank(1, 0.05), 2);
        let scores: Vec<f64> = (0..19).map(|i| i as f64 / 100.0).collect();
        let c = calibrate(&[scores, vec![0.3], vec![0.4; 40]], 0.05).unwrap();
        assert_eq!(c.q[0], 0.18);
        assert_eq!(c.q[1], 1.0);
        assert_eq!(c.q[2], 0.4);
        let none = calibrate(&[vec![]], 0.05).unwrap();
        assert_eq!(none.q, vec![1.0]);
    }

    #[test]
    fn set_examples() {
        let p = ProbField::new(3, 1, 1, vec![0.7, 0.2, 0.1]).unwrap();
        let half = ConformalCalibration { alpha: 0.1, q: vec![0.5; 3], counts: vec![1; 3] };
        let s = predict_set(&p, &half).unwrap();
        assert_eq!(s.members, vec![true, false, false]);
        let all = ConformalCalibration { q: vec![1.0; 3], ..half.clone() };
        assert_eq!(avg_set_size(&predict_set(&p, &all).unwrap()), 3.0);
        let zero = ConformalCalibration { q: vec![0.0; 3], ..half };
        assert_eq!(predict_set(&p, &zero).unwrap().empty_count(), 1);
    }

    #[test]
    fn four_pixel_coverage() {
        let sets = PredictionSet {
            num_classes: 2,
            members: vec![true, false, false, true, true, false, true, false],
        };
        let labels = ClassField::new(2, 2, vec![0, 0, 1, 0], 2).unwrap();
        assert_eq!(picp(&sets, &labels).unwrap(), 0.5);
    }
}
