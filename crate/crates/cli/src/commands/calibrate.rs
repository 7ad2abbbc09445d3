use serde::Serialize;
use serde_json::json;
use stormtail_core::conformal::{calibrate as fit_conformal, conformity_scores, predict_set, ConformalCalibration, CoverageStats};
use stormtail_core::container::{Container, NamedArray};
use stormtail_core::field::ProbField;
use stormtail_core::grid::ClassField;

use super::members;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;
use crate::Ctx;

pub const CONFORMAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct AlphaReport {
    alpha: f64,
    q: Vec<f64>,
    counts: Vec<usize>,
    pixels: usize,
    /// Marginal coverage over all test pixels.
    picp: Option<f64>,
    /// Coverage averaged over classes.
    mean_class_picp: Option<f64>,
    per_class_picp: Vec<Option<f64>>,
    avg_set_size: Option<f64>,
    empty_sets: usize,
}

pub fn calibrate(ctx: &Ctx) -> CliResult<()> {
    let variant = ctx.variant()?;
    let schema = ctx.cfg.threshold_schema()?;
    let data = dataset::open(&ctx.cfg)?;
    if data.calib.is_empty() {
        return Err(CliError::Data("the calibration split is empty; raise split.calibration_fraction".into()));
    }
    let seed = ctx.seeds()[0];
    let one_seed = Ctx {
        seed: Some(seed),
        ..ctx.clone()
    };
    let cal_samples = data.pick(&data.calib);
    let test_samples = data.pick(&data.test);
    let cal = members(&one_seed, &data, variant, &cal_samples)?.remove(0);
    let test = members(&one_seed, &data, variant, &test_samples)?.remove(0);
    let cal_probs: Vec<ProbField> = cal.preds.iter().map(|p| p.probs.clone()).collect();
    let cal_labels: Vec<ClassField> = cal_samples.iter().map(|s| s.target_class.clone()).collect();
    let scores = conformity_scores(&cal_probs, &cal_labels)?;

    let mut calibrations: Vec<ConformalCalibration> = Vec::new();
    let mut reports = Vec::new();
    for &alpha in &ctx.cfg.calibrate.alphas {
        let calib = fit_conformal(&scores, alpha)?;
        let mut cov = CoverageStats::new(schema.num_classes());
        for (p, s) in test.preds.iter().zip(&test_samples) {
            let mut sets = predict_set(&p.probs, &calib)?;
            if ctx.cfg.calibrate.force_argmax {
                let c = sets.num_classes;
                for (px, &k) in p.classes.labels().iter().enumerate() {
                    sets.members[px * c + k as usize] = true;
                }
            }
            cov.add(&sets, &s.target_class)?;
        }
        reports.push(AlphaReport {
            alpha,
            q: calib.q.clone(),
            counts: calib.counts.clone(),
            pixels: cov.pixels,
            picp: cov.picp(),
            mean_class_picp: cov.mean_class_picp(),
            per_class_picp: cov.per_class_picp(),
            avg_set_size: cov.avg_set_size(),
            empty_sets: cov.empty_sets,
        });
        log::info!(
            "alpha {alpha}: PICP {:?}, class-mean PICP {:?}, set size {:?}",
            cov.picp(),
            cov.mean_class_picp(),
            cov.avg_set_size()
        );
        calibrations.push(calib);
    }

    let mut outputs = Outputs::new(&ctx.out);
    let mut container = Container::new(json!({
        "schema_version": CONFORMAL_SCHEMA_VERSION,
        "kind": "conformal",
        "variant": variant.name(),
        "seed": cal.seed,
        "num_classes": schema.num_classes(),
        "calibration_samples": cal_samples.len(),
        "calibrations": calibrations,
    }));
    for (i, c) in calibrations.iter().enumerate() {
        container.push(NamedArray::from_f64(format!("q_{i}"), vec![c.q.len()], &c.q));
        let counts: Vec<f64> = c.counts.iter().map(|&n| n as f64).collect();
        container.push(NamedArray::from_f64(format!("counts_{i}"), vec![counts.len()], &counts));
    }
    let path = outputs.path("conformal.dpsg")?;
    container.write(&path)?;
    outputs.record(&path);
    outputs.write_json(
        "picp.json",
        &json!({
            "schema_version": CONFORMAL_SCHEMA_VERSION,
            "variant": variant.name(),
            "seed": cal.seed,
            "calibration_samples": cal_samples.len(),
            "test_samples": test_samples.len(),
            "force_argmax": ctx.cfg.calibrate.force_argmax,
            "results": reports,
        }),
    )?;
    let mut inputs = data.files()?;
    inputs.extend(cal.inputs);
    ctx.finish("calibrate", Some(variant), cal.seed.into_iter().collect(), inputs, &outputs)
}
