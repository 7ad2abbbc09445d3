mod attribute;
mod calibrate;
mod datagen;
mod eval;
mod report;
mod train;

use std::path::PathBuf;

use stormtail_core::data::{fit_normalization, Sample};
use stormtail_core::qm::fit_qm_samples;
use stormtail_nn::checkpoint::Checkpoint;
use stormtail_nn::predict::{predict, predict_qm, predict_raw_nwp, prepare, Prediction, Prepared};
use stormtail_nn::{Model, Variant};

pub use attribute::attribute;
pub use calibrate::calibrate;
pub use datagen::datagen;
pub use eval::eval;
pub use report::report;
pub use train::train;

use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::manifest::{entry, FileEntry};
use crate::Ctx;

pub const BEST_CHECKPOINT: &str = "best.dpsg";

/// One set of predictions to score: a trained seed or a statistical
/// reference.
pub struct Member {
    pub seed: Option<u64>,
    pub preds: Vec<Prediction>,
    pub model: Option<Model>,
    pub prepared: Vec<Prepared>,
    pub inputs: Vec<FileEntry>,
}

fn checkpoint_path(ctx: &Ctx, variant: Variant, seed: u64) -> CliResult<PathBuf> {
    if let Some(p) = &ctx.cfg.paths.checkpoint {
        return Ok(p.clone());
    }
    let run = ctx
        .cfg
        .paths
        .run
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.run or paths.checkpoint must name the trained run".into()))?;
    Ok(run.join(variant.name()).join(format!("seed_{seed}")).join(BEST_CHECKPOINT))
}

pub fn load_checkpoint(ctx: &Ctx, data: &Dataset, variant: Variant, seed: u64) -> CliResult<(Checkpoint, FileEntry)> {
    let path = checkpoint_path(ctx, variant, seed)?;
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.meta.variant != variant {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained as {}, not {variant}",
            path.display(),
            ckpt.meta.variant
        )));
    }
    if ckpt.meta.schema != ctx.cfg.threshold_schema()? {
        return Err(CliError::Data(format!("checkpoint {} uses a different threshold schema", path.display())));
    }
    let fitted = fit_normalization(&data.pick(&data.train))?;
    if fitted != ckpt.meta.normalization {
        return Err(CliError::Data(format!(
            "normalization statistics of {} do not match the dataset's training split",
            path.display()
        )));
    }
    let e = entry(&path, path.display().to_string())?;
    Ok((ckpt, e))
}

/// Predictions on `samples` for every requested seed of the variant.
pub fn members(ctx: &Ctx, data: &Dataset, variant: Variant, samples: &[&Sample]) -> CliResult<Vec<Member>> {
    let schema = ctx.cfg.threshold_schema()?;
    let reference = |preds| Member {
        seed: None,
        preds,
        model: None,
        prepared: Vec::new(),
        inputs: Vec::new(),
    };
    match variant {
        Variant::RawNwp => Ok(vec![reference(predict_raw_nwp(samples, &schema))]),
        Variant::Qm => {
            let qm = fit_qm_samples(&data.pick(&data.train), ctx.cfg.eval.qm_quantiles)?;
            Ok(vec![reference(predict_qm(samples, &qm, &schema))])
        }
        _ => {
            let seeds = if ctx.cfg.paths.checkpoint.is_some() {
                vec![ctx.seeds()[0]]
            } else {
                ctx.seeds()
            };
            seeds
                .into_iter()
                .map(|seed| {
                    let (ckpt, e) = load_checkpoint(ctx, data, variant, seed)?;
                    let prepared = prepare(samples, &ckpt.meta.normalization)?;
                    let shift = if ckpt.meta.train.la_at_inference && variant.uses_logit_adjustment() {
                        Some(stormtail_core::losses::la_offsets(&ckpt.meta.class_stats, ckpt.meta.loss.tau)?)
                    } else {
                        None
                    };
                    let preds = predict(&ckpt.model, &prepared, shift.as_deref())?;
                    Ok(Member {
                        seed: Some(ckpt.meta.seed),
                        preds,
                        model: Some(ckpt.model),
                        prepared,
                        inputs: vec![e],
                    })
                })
                .collect()
        }
    }
}

/// Formats an optional value for CSV: shortest round-trip decimal or empty.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
