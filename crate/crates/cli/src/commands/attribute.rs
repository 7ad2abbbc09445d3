use serde::Serialize;
use serde_json::json;
use stormtail_core::attribution::{aggregate_importance, Importance, Reduction};
use stormtail_nn::ig::attribute_sample;

use super::members;
use crate::config::MaskSource;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;
use crate::plot::horizontal_bars;
use crate::Ctx;

pub const ATTRIBUTION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct ReductionReport {
    reduction: Reduction,
    /// Samples for which the reduction selected no pixels.
    skipped: usize,
    /// Largest `|sum(attribution) - (F(x) - F(0))|` relative to `|F(x) - F(0)|`.
    max_relative_gap: f64,
    importance: Option<Importance>,
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::AllPixels => "all_pixels",
        Reduction::HeavyPixels => "heavy_pixels",
    }
}

pub fn attribute(ctx: &Ctx) -> CliResult<()> {
    let variant = ctx.variant()?;
    if !variant.is_trainable() {
        return Err(CliError::Config(format!("{variant} has no network to attribute")));
    }
    let schema = ctx.cfg.threshold_schema()?;
    let acfg = &ctx.cfg.attribute;
    let data = dataset::open(&ctx.cfg)?;
    let seed = ctx.seeds()[0];
    let one_seed = Ctx {
        seed: Some(seed),
        ..ctx.clone()
    };
    let test: Vec<usize> = data.test.iter().copied().take(acfg.max_samples).collect();
    let samples = data.pick(&test);
    let member = members(&one_seed, &data, variant, &samples)?.remove(0);
    let model = member.model.as_ref().expect("learned variants carry a model");

    let mut outputs = Outputs::new(&ctx.out);
    let mut reports = Vec::new();
    for &reduction in &acfg.reductions {
        let mut per_sample = Vec::new();
        let mut skipped = 0;
        let mut max_gap = 0.0_f64;
        for p in &member.prepared {
            let observed = match acfg.mask {
                MaskSource::Observation => Some(&p.target),
                MaskSource::Prediction => None,
            };
            match attribute_sample(model, &p.input, reduction, observed, &schema, acfg.steps)? {
                Some(a) => {
                    max_gap = max_gap.max(a.completeness_gap() / a.output_delta.abs().max(1e-12));
                    per_sample.push(a.per_channel);
                }
                None => skipped += 1,
            }
        }
        let importance = if per_sample.is_empty() {
            log::warn!("{} selected no pixels in any sample", reduction_name(reduction));
            None
        } else {
            Some(aggregate_importance(&per_sample)?)
        };
        if let Some(imp) = &importance {
            let items: Vec<(String, f64)> = imp.channels.iter().map(|c| (c.channel.clone(), c.full)).collect();
            let svg = horizontal_bars(
                &format!("{variant} channel importance ({})", reduction_name(reduction)),
                "normalized mean |IG|",
                &items,
            )?;
            outputs.write_bytes(&format!("attribution_{}.svg", reduction_name(reduction)), svg.as_bytes())?;
        }
        reports.push(ReductionReport {
            reduction,
            skipped,
            max_relative_gap: max_gap,
            importance,
        });
    }
    outputs.write_json(
        "attribution.json",
        &json!({
            "schema_version": ATTRIBUTION_SCHEMA_VERSION,
            "variant": variant.name(),
            "seed": member.seed,
            "steps": acfg.steps,
            "mask": acfg.mask,
            "samples": samples.len(),
            "reductions": reports,
        }),
    )?;
    let mut inputs = data.files()?;
    inputs.extend(member.inputs);
    ctx.finish("attribute", Some(variant), member.seed.into_iter().collect(), inputs, &outputs)
}
