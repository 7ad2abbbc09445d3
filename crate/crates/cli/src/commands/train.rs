use std::fs::File;
use std::io::{BufWriter, Write};

use serde_json::json;
use stormtail_core::data::fit_normalization;
use stormtail_core::losses::ClassStats;
use stormtail_core::qm::fit_qm_samples;
use stormtail_nn::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
use stormtail_nn::predict::prepare;
use stormtail_nn::train::{train as train_seed, RunSpec};
use stormtail_nn::{Model, Variant};

use super::BEST_CHECKPOINT;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;
use crate::Ctx;

pub const QM_SCHEMA_VERSION: u32 = 1;

pub fn train(ctx: &Ctx) -> CliResult<()> {
    let variant = ctx.variant()?;
    let data = dataset::open(&ctx.cfg)?;
    let mut outputs = Outputs::new(&ctx.out.join(variant.name()));
    let train_samples = data.pick(&data.train);
    match variant {
        Variant::RawNwp => {
            return Err(CliError::Config("raw_nwp has nothing to train; evaluate it directly".into()));
        }
        Variant::Qm => {
            let qm = fit_qm_samples(&train_samples, ctx.cfg.eval.qm_quantiles)?;
            outputs.write_json(
                "qm.json",
                &json!({ "schema_version": QM_SCHEMA_VERSION, "kind": "qm", "model": qm }),
            )?;
            return ctx.finish("train", Some(variant), Vec::new(), data.files()?, &outputs);
        }
        _ => {}
    }

    let schema = ctx.cfg.threshold_schema()?;
    let norm = fit_normalization(&train_samples)?;
    let train_set = prepare(&train_samples, &norm)?;
    let val_set = prepare(&data.pick(&data.val), &norm)?;
    let fields: Vec<_> = train_samples.iter().map(|s| &s.target_class).collect();
    let mut stats = ClassStats::from_fields(&fields, schema.num_classes())?;
    if stats.counts().contains(&0) {
        log::warn!("training split lacks some classes {:?}; flooring counts at 1", stats.counts());
        stats = stats.with_floor(1);
    }
    let spec = RunSpec::new(
        variant,
        &ctx.cfg.model,
        ctx.cfg.loss.clone(),
        ctx.cfg.train.clone(),
        schema.clone(),
        stats,
    )?;
    let meta = |seed: u64, epoch: usize| CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: "checkpoint".into(),
        variant,
        seed,
        epoch,
        model: spec.model.clone(),
        normalization: norm.clone(),
        schema: schema.clone(),
        class_stats: spec.stats.clone(),
        loss: spec.loss.clone(),
        train: spec.train.clone(),
    };
    let save = |outputs: &mut Outputs, rel: &str, model: &Model, seed: u64, epoch: usize| -> CliResult<()> {
        let path = outputs.path(rel)?;
        Checkpoint {
            meta: meta(seed, epoch),
            model: model.clone(),
        }
        .save(&path)?;
        outputs.record(&path);
        Ok(())
    };

    let seeds = ctx.seeds();
    for &seed in &seeds {
        let dir = format!("seed_{seed}");
        let log_path = outputs.path(&format!("{dir}/log.jsonl"))?;
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
        outputs.record(&log_path);
        let every = spec.train.checkpoint_every;
        let result = train_seed(&spec, seed, &train_set, &val_set, |ev| {
            for r in ev.records {
                serde_json::to_writer(&mut log, r).map_err(stormtail_core::Error::from)?;
                writeln!(log)?;
            }
            log.flush()?;
            if ev.epoch % every == 0 {
                let rel = format!("{dir}/epoch_{:04}.dpsg", ev.epoch);
                save(&mut outputs, &rel, ev.model, seed, ev.epoch).map_err(|e| std::io::Error::other(e.to_string()))?;
            }
            Ok(())
        });
        let outcome = result?;
        save(&mut outputs, &format!("{dir}/{BEST_CHECKPOINT}"), &outcome.best, seed, outcome.best_epoch)?;
        save(&mut outputs, &format!("{dir}/last.dpsg"), &outcome.final_model, seed, spec.train.epochs)?;
        log::info!(
            "{variant} seed {seed}: best epoch {} (heavy CSI {:?})",
            outcome.best_epoch,
            outcome.best_score
        );
    }
    ctx.finish("train", Some(variant), seeds, data.files()?, &outputs)
}
