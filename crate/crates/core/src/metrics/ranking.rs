use serde::{Deserialize, Serialize};

use super::{contingency, fss_parts, scores, ContingencyTable, ScoreSet};
use crate::error::{Error, Result};
use crate::grid::Mask;

pub const DEFAULT_TOP_FRACS: [f64; 4] = [0.25, 0.10, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedScores {
    pub top_frac: f64,
    pub samples: usize,
    pub table: ContingencyTable,
    pub scores: ScoreSet,
    pub fss: f64,
}

/// `ceil(frac * n)`, guarded against float noise such as `0.01 * 100`.
pub fn top_count(n: usize, frac: f64) -> usize {
    let x = frac * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Sample indices sorted by descending observed event coverage; ties keep
/// ascending index order.
pub fn coverage_order(obs: &[Mask]) -> Vec<usize> {
    let cover: Vec<f64> = obs
        .iter()
        .map(|m| m.count() as f64 / m.data().len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| cover[b].total_cmp(&cover[a]));
    order
}

/// Pooled scores and FSS within the top fractions of samples ranked by
/// observed event coverage.
pub fn coverage_ranking(pred: &[Mask], obs: &[Mask], top_fracs: &[f64], fss_n: usize) -> Result<Vec<RankedScores>> {
    if obs.is_empty() || pred.len() != obs.len() {
        return Err(Error::Empty(format!(
            "coverage ranking needs matching nonempty sets, got {} predictions and {} observations",
            pred.len(),
            obs.len()
        )));
    }
    let order = coverage_order(obs);
    let mut out = Vec::with_capacity(top_fracs.len());
    for &frac in top_fracs {
        let k = top_count(obs.len(), frac);
        if k == 0 || frac > 1.0 {
            return Err(Error::Empty(format!(
                "top fraction {frac} of {} samples selects {k}",
                obs.len()
            )));
        }
        let mut table = ContingencyTable::default();
        let mut parts = super::FssParts::default();
        for &i in &order[..k] {
            table += contingency(&pred[i], &obs[i])?;
            parts = parts.merge(fss_parts(&pred[i], &obs[i], fss_n)?);
        }
        out.push(RankedScores {
            top_frac: frac,
            samples: k,
            table,
            scores: scores(&table),
            fss: parts.score(),
        });
    }
    Ok(out)
}
