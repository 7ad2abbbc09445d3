use rand::Rng;

use super::ContingencyTable;
use crate::error::{Error, Result};

/// Nearest-rank percentile of a sorted slice, `p` in `[0, 1]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let rank = ((p * m as f64).ceil() as usize).clamp(1, m);
    sorted[rank - 1]
}

/// Percentile bootstrap interval of a pooled score.
///
/// Each replicate resamples whole samples with replacement, sums their tables
/// and scores the pooled table. Nearest-rank percentiles keep both bounds
/// inside the set of replicate values. Returns `Ok(None)` when the metric is
/// undefined in more than half of the replicates.
pub fn bootstrap_ci<R, F>(
    tables: &[ContingencyTable],
    metric: F,
    n_boot: usize,
    level: f64,
    rng: &mut R,
) -> Result<Option<(f64, f64)>>
where
    R: Rng + ?Sized,
    F: Fn(&ContingencyTable) -> Option<f64>,
{
    if tables.len() < 2 {
        return Err(Error::Empty("bootstrap needs at least 2 samples".into()));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs n_boot > 0 and level in (0, 1), got {n_boot} and {level}"
        )));
    }
    let n = tables.len();
    let mut values = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut pooled = ContingencyTable::default();
        for _ in 0..n {
            pooled += tables[rng.random_range(0..n)];
        }
        if let Some(v) = metric(&pooled) {
            values.push(v);
        }
    }
    if 2 * values.len() < n_boot {
        return Ok(None);
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Some((nearest_rank(&values, tail), nearest_rank(&values, 1.0 - tail))))
}
