//! Categorical and neighbourhood verification scores.
//!
//! Tables are additive, so pooled scores over a test set are computed by
//! summing per-sample tables and scoring once. Quotients with a zero
//! denominator come back as `None` instead of NaN.

mod bootstrap;
mod fss;
mod ranking;
mod report;

pub use bootstrap::{bootstrap_ci, nearest_rank};
pub use fss::{fractions, fss, fss_parts, FssParts};
pub use ranking::{coverage_order, coverage_ranking, top_count, RankedScores, DEFAULT_TOP_FRACS};
pub use report::{evaluate_thresholds, mean_scores, per_sample_average, per_sample_tables, ThresholdScores};

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassField, Mask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ContingencyTable {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ContingencyTable {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ContingencyTable {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn contingency(pred: &Mask, obs: &Mask) -> Result<ContingencyTable> {
    if !pred.same_shape(obs) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", obs.height(), obs.width()),
            actual: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    let mut t = ContingencyTable::default();
    for (&p, &o) in pred.data().iter().zip(obs.data()) {
        match (p, o) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(t)
}

/// Table for the event "class >= min_class".
pub fn class_contingency(pred: &ClassField, obs: &ClassField, min_class: usize) -> Result<ContingencyTable> {
    contingency(&pred.at_least(min_class), &obs.at_least(min_class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Csi,
    Ets,
    Pod,
    Bias,
    Mar,
    Far,
    F1,
    Sedi,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Csi,
        Metric::Ets,
        Metric::Pod,
        Metric::Bias,
        Metric::Mar,
        Metric::Far,
        Metric::F1,
        Metric::Sedi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Csi => "csi",
            Metric::Ets => "ets",
            Metric::Pod => "pod",
            Metric::Bias => "bias",
            Metric::Mar => "mar",
            Metric::Far => "far",
            Metric::F1 => "f1",
            Metric::Sedi => "sedi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub csi: Option<f64>,
    pub ets: Option<f64>,
    pub pod: Option<f64>,
    pub bias: Option<f64>,
    pub mar: Option<f64>,
    pub far: Option<f64>,
    pub f1: Option<f64>,
    pub sedi: Option<f64>,
}

impl ScoreSet {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Csi => self.csi,
            Metric::Ets => self.ets,
            Metric::Pod => self.pod,
            Metric::Bias => self.bias,
            Metric::Mar => self.mar,
            Metric::Far => self.far,
            Metric::F1 => self.f1,
            Metric::Sedi => self.sedi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ScoreOptions {
    /// Clamp H and F into `[delta, 1 - delta]` before SEDI instead of
    /// reporting undefined at the boundaries.
    pub sedi_clamp: Option<f64>,
}


fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn scores(t: &ContingencyTable) -> ScoreSet {
    scores_with(t, ScoreOptions::default())
}

pub fn scores_with(t: &ContingencyTable, opts: ScoreOptions) -> ScoreSet {
    let (tp, fp, fn_, tn) = (t.tp as f64, t.fp as f64, t.fn_ as f64, t.tn as f64);
    let n = tp + fp + fn_ + tn;
    let tp_random = if n > 0.0 { (tp + fp) * (tp + fn_) / n } else { 0.0 };
    let ets = if n > 0.0 {
        ratio(tp - tp_random, tp + fn_ + fp - tp_random)
    } else {
        None
    };
    let pod = ratio(tp, tp + fn_);
    let far_rate = ratio(fp, fp + tn);
    ScoreSet {
        csi: ratio(tp, tp + fn_ + fp),
        ets,
        pod,
        bias: ratio(tp + fp, tp + fn_),
        mar: ratio(fn_, tp + fn_),
        far: ratio(fp, tp + fp),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        sedi: pod.zip(far_rate).and_then(|(h, f)| sedi(h, f, opts.sedi_clamp)),
    }
}

/// SEDI from hit rate `h` and false-alarm rate `f`.
pub fn sedi(h: f64, f: f64, clamp: Option<f64>) -> Option<f64> {
    let (h, f) = match clamp {
        Some(d) => (h.clamp(d, 1.0 - d), f.clamp(d, 1.0 - d)),
        None => (h, f),
    };
    if h <= 0.0 || h >= 1.0 || f <= 0.0 || f >= 1.0 {
        return None;
    }
    let (lf, lh, l1h, l1f) = (f.ln(), h.ln(), (1.0 - h).ln(), (1.0 - f).ln());
    ratio(lf - lh + l1h - l1f, lf + lh + l1h + l1f)
}
