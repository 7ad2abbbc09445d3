//! Inference: normalized inputs, per-pixel class decisions and probability
//! fields for learned and statistical variants.

use stormtail_core::data::{apply_normalization, NormalizationStats, Sample};
use stormtail_core::field::{LogitsField, ProbField};
use stormtail_core::grid::{classify, ClassField, ThresholdSchema};
use stormtail_core::losses::shift_classes;
use stormtail_core::qm::{apply_qm, QMModel};
use stormtail_core::Result;

use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::Tensor;

/// A sample ready for the network: normalized predictors and class target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: Tensor,
    pub target: ClassField,
}

pub fn prepare(samples: &[&Sample], stats: &NormalizationStats) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let p = apply_normalization(&s.predictors, stats)?;
            Ok(Prepared {
                input: Tensor::new(vec![p.channels(), p.height(), p.width()], p.data().to_vec()),
                target: s.target_class.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub main: LogitsField,
    pub spatial: Option<LogitsField>,
    /// Penultimate decoder features `[D, H, W]`.
    pub embedding: Tensor,
}

fn to_logits(t: &Tensor) -> LogitsField {
    LogitsField::new(t.dim(0), t.dim(1), t.dim(2), t.data().to_vec()).expect("network logits are [C, H, W]")
}

pub fn infer(model: &Model, input: &Tensor) -> Result<Inference> {
    let mut g = Graph::new(&model.params);
    let x = g.input(input.clone());
    let out = model.forward(&mut g, x)?;
    Ok(Inference {
        main: to_logits(g.value(out.main_logits)),
        spatial: out.spatial_logits.map(|v| to_logits(g.value(v))),
        embedding: g.value(out.embedding).clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ProbField,
    pub classes: ClassField,
}

/// Per-pixel argmax of the logits, optionally shifted per class first.
pub fn decide(logits: &LogitsField, shift: Option<&[f64]>) -> ClassField {
    match shift {
        Some(o) => shift_classes(logits, o).argmax(),
        None => logits.argmax(),
    }
}

pub fn predict_one(model: &Model, input: &Tensor, shift: Option<&[f64]>) -> Result<Prediction> {
    let inf = infer(model, input)?;
    Ok(Prediction {
        probs: inf.main.softmax(),
        classes: decide(&inf.main, shift),
    })
}

pub fn predict(model: &Model, inputs: &[Prepared], shift: Option<&[f64]>) -> Result<Vec<Prediction>> {
    inputs.iter().map(|p| predict_one(model, &p.input, shift)).collect()
}

fn one_hot_prediction(classes: ClassField, num_classes: usize) -> Prediction {
    Prediction {
        probs: ProbField::one_hot(&classes, num_classes),
        classes,
    }
}

/// Classifies the NWP precipitation channel directly.
pub fn predict_raw_nwp(samples: &[&Sample], schema: &ThresholdSchema) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| one_hot_prediction(classify(&s.nwp_precipitation(), schema), schema.num_classes()))
        .collect()
}

/// Classifies quantile-mapped NWP precipitation.
pub fn predict_qm(samples: &[&Sample], qm: &QMModel, schema: &ThresholdSchema) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| {
            let mapped = apply_qm(&s.nwp_precipitation(), qm);
            one_hot_prediction(classify(&mapped, schema), schema.num_classes())
        })
        .collect()
}

/// Per-class pools of decoder embeddings, one `dim`-vector per pixel,
/// grouped by the target class of that pixel. Returns `(dim, pools)`.
pub fn embedding_pools(model: &Model, inputs: &[Prepared], num_classes: usize) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut pools = vec![Vec::new(); num_classes];
    let mut dim = 0;
    for p in inputs {
        let e = infer(model, &p.input)?.embedding;
        dim = e.dim(0);
        let hw = e.dim(1) * e.dim(2);
        for (px, &k) in p.target.labels().iter().enumerate() {
            let pool = &mut pools[k as usize];
            pool.extend((0..dim).map(|d| e.data()[d * hw + px]));
        }
    }
    Ok((dim, pools))
}
