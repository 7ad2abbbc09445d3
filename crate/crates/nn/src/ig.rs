//! Integrated Gradients for the segmentation network.
//!
//! The attributed scalar is the mean, over the selected pixels, of the logit
//! of the class the model predicts at the actual input. Classes and pixel
//! mask are fixed once, before integration, so every path point
//! differentiates the same function.

use stormtail_core::attribution::{channel_sums, integrated_gradients, Reduction};
use stormtail_core::field::LogitsField;
use stormtail_core::grid::{ClassField, ThresholdSchema};
use stormtail_core::Result;

use crate::graph::Graph;
use crate::model::Model;
use crate::predict::infer;
use crate::tensor::Tensor;

/// Pixel selection and class per pixel defining the scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub pixels: Vec<usize>,
    pub classes: Vec<u8>,
}

impl Target {
    /// Classes from the model's argmax; pixels from the reduction, with the
    /// heavy mask taken from `observed` when given and from the prediction
    /// otherwise. `None` when no pixel is selected.
    pub fn select(
        logits: &LogitsField,
        reduction: Reduction,
        observed: Option<&ClassField>,
        schema: &ThresholdSchema,
    ) -> Option<Self> {
        let pred = logits.argmax();
        let labels = pred.labels();
        let mask_labels = observed.map_or(labels, ClassField::labels);
        let heavy = schema.heavy_classes();
        let pixels: Vec<usize> = (0..labels.len())
            .filter(|&p| match reduction {
                Reduction::AllPixels => true,
                Reduction::HeavyPixels => heavy.contains(&(mask_labels[p] as usize)),
            })
            .collect();
        if pixels.is_empty() {
            return None;
        }
        let classes = pixels.iter().map(|&p| labels[p]).collect();
        Some(Self { pixels, classes })
    }

    fn seed(&self, c: usize, hw: usize) -> Vec<f64> {
        let mut s = vec![0.0; c * hw];
        let w = 1.0 / self.pixels.len() as f64;
        for (&p, &k) in self.pixels.iter().zip(&self.classes) {
            s[k as usize * hw + p] = w;
        }
        s
    }

    pub fn scalar(&self, logits: &[f64], hw: usize) -> f64 {
        let sum: f64 = self.pixels.iter().zip(&self.classes).map(|(&p, &k)| logits[k as usize * hw + p]).sum();
        sum / self.pixels.len() as f64
    }
}

/// Scalar value and its gradient with respect to the input.
pub fn scalar_and_gradient(model: &Model, input: &Tensor, target: &Target) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(&model.params);
    let x = g.input_with_grad(input.clone());
    let out = model.forward(&mut g, x)?;
    let logits = g.value(out.main_logits);
    let (c, hw) = (logits.dim(0), logits.dim(1) * logits.dim(2));
    let value = target.scalar(logits.data(), hw);
    let seed = target.seed(c, hw);
    let grads = g.backward(&[(out.main_logits, &seed)]);
    let gx = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
    Ok((value, gx))
}

/// Attribution of one sample with a zero baseline.
#[derive(Debug, Clone)]
pub struct SampleAttribution {
    pub attribution: Vec<f64>,
    pub per_channel: Vec<f64>,
    /// `F(x) - F(0)`; completeness compares this against the attribution sum.
    pub output_delta: f64,
}

impl SampleAttribution {
    pub fn completeness_gap(&self) -> f64 {
        let total: f64 = self.attribution.iter().sum();
        (total - self.output_delta).abs()
    }
}

/// `None` when the reduction selects no pixels for this sample.
pub fn attribute_sample(
    model: &Model,
    input: &Tensor,
    reduction: Reduction,
    observed: Option<&ClassField>,
    schema: &ThresholdSchema,
    steps: usize,
) -> Result<Option<SampleAttribution>> {
    let inf = infer(model, input)?;
    let Some(target) = Target::select(&inf.main, reduction, observed, schema) else {
        return Ok(None);
    };
    let shape = input.shape().to_vec();
    let attribution = integrated_gradients(input.data(), None, steps, |p| {
        Ok(scalar_and_gradient(model, &Tensor::new(shape.clone(), p.to_vec()), &target)?.1)
    })?;
    let hw = inf.main.height() * inf.main.width();
    let at_x = target.scalar(inf.main.data(), hw);
    let at_zero = target.scalar(infer(model, &Tensor::zeros(shape.clone()))?.main.data(), hw);
    Ok(Some(SampleAttribution {
        per_channel: channel_sums(&attribution, shape[0]),
        attribution,
        output_delta: at_x - at_zero,
    }))
}
