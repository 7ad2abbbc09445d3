use chrono::{DateTime, Datelike, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Inclusive last years of the training and validation periods; everything
/// later is test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodBoundaries {
    pub train_last_year: i32,
    pub val_last_year: i32,
}

impl Default for PeriodBoundaries {
    fn default() -> Self {
        Self {
            train_last_year: 2010,
            val_last_year: 2011,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn parse_timestamp(ts: &str) -> Result<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(ts) {
        return Ok(dt.naive_utc());
    }
    NaiveDateTime::parse_from_str(ts, "%Y-%m-%dT%H:%M:%S")
        .map_err(|e| Error::Timestamp(format!("{ts:?}: {e}")))
}

/// Chronological split by calendar year. Indices keep their original order
/// within each partition.
pub fn split_by_period(samples: &[Sample], boundaries: PeriodBoundaries, seed: u64) -> Result<DatasetSplit> {
    if boundaries.train_last_year >= boundaries.val_last_year {
        return Err(Error::Config(format!(
            "train period must end before validation: {boundaries:?}"
        )));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (i, s) in samples.iter().enumerate() {
        let year = parse_timestamp(&s.timestamp)?.year();
        if year <= boundaries.train_last_year {
            split.train.push(i);
        } else if year <= boundaries.val_last_year {
            split.val.push(i);
        } else {
            split.test.push(i);
        }
    }
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name.into()));
        }
    }
    Ok(split)
}
