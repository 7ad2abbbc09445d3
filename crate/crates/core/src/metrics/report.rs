use serde::{Deserialize, Serialize};

use super::{class_contingency, fss_parts, scores, ContingencyTable, FssParts, Metric, ScoreSet};
use crate::error::{Error, Result};
use crate::grid::{ClassField, ThresholdSchema};

/// Pooled scores for the event "rain >= threshold" over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub min_class: usize,
    pub table: ContingencyTable,
    pub scores: ScoreSet,
    pub fss: f64,
    pub fss_n: usize,
}

/// Per-sample tables for the event "class >= min_class".
pub fn per_sample_tables(pred: &[ClassField], obs: &[ClassField], min_class: usize) -> Result<Vec<ContingencyTable>> {
    if pred.len() != obs.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} predictions", obs.len()),
            actual: format!("{}", pred.len()),
        });
    }
    pred.iter().zip(obs).map(|(p, o)| class_contingency(p, o, min_class)).collect()
}

/// Scores at every schema threshold, pooling tables and FSS sums over samples.
pub fn evaluate_thresholds(
    pred: &[ClassField],
    obs: &[ClassField],
    schema: &ThresholdSchema,
    fss_n: usize,
) -> Result<Vec<ThresholdScores>> {
    if obs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut out = Vec::new();
    for (k, &t) in schema.thresholds().iter().enumerate() {
        let min_class = k + 1;
        let tables = per_sample_tables(pred, obs, min_class)?;
        let table: ContingencyTable = tables.iter().copied().sum();
        let mut parts = FssParts::default();
        for (p, o) in pred.iter().zip(obs) {
            parts = parts.merge(fss_parts(&p.at_least(min_class), &o.at_least(min_class), fss_n)?);
        }
        out.push(ThresholdScores {
            threshold: t,
            min_class,
            table,
            scores: scores(&table),
            fss: parts.score(),
            fss_n,
        });
    }
    Ok(out)
}

/// Field-wise mean of the defined values; `None` where no input defines it.
pub fn mean_scores(sets: &[ScoreSet]) -> ScoreSet {
    let mean = |m: Metric| {
        let v: Vec<f64> = sets.iter().filter_map(|s| s.get(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    ScoreSet {
        csi: mean(Metric::Csi),
        ets: mean(Metric::Ets),
        pod: mean(Metric::Pod),
        bias: mean(Metric::Bias),
        mar: mean(Metric::Mar),
        far: mean(Metric::Far),
        f1: mean(Metric::F1),
        sedi: mean(Metric::Sedi),
    }
}

/// Score each sample separately, then average (the non-default aggregation).
pub fn per_sample_average(tables: &[ContingencyTable]) -> ScoreSet {
    let sets: Vec<ScoreSet> = tables.iter().map(scores).collect();
    mean_scores(&sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClassField;

    fn field(labels: &[u8]) -> ClassField {
        ClassField::new(2, 2, labels.to_vec(), 6).unwrap()
    }

    #[test]
    fn perfect_self_evaluation() {
        let obs = vec![field(&[0, 1, 3, 5]), field(&[2, 4, 4, 0])];
        let r = evaluate_thresholds(&obs, &obs, &ThresholdSchema::default(), 1).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.iter().all(|t| t.scores.csi == Some(1.0) && t.fss == 1.0));
    }

    #[test]
    fn seed_mean_matches_hand_average() {
        let a = ScoreSet { csi: Some(0.1), sedi: None, ..ScoreSet::default() };
        let b = ScoreSet { csi: Some(0.25), sedi: Some(0.4), ..ScoreSet::default() };
        let c = ScoreSet { csi: Some(0.04), sedi: Some(0.2), ..ScoreSet::default() };
        let m = mean_scores(&[a, b, c]);
        assert!((m.csi.unwrap() - (0.1 + 0.25 + 0.04) / 3.0).abs() < 1e-12);
        assert!((m.sedi.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(m.pod, None);
    }
}
