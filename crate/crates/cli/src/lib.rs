//! The `stormtail` pipeline: data generation, training, evaluation,
//! calibration, attribution and reporting.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;
use std::time::Instant;

use stormtail_nn::Variant;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{FileEntry, Outputs, RunManifest, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION};

/// Shared state of one command invocation.
#[derive(Clone)]
pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub deterministic: bool,
    started: Instant,
}

impl Ctx {
    pub fn new(cfg: Config, out: PathBuf, seed: Option<u64>, variant: Option<String>, deterministic: bool) -> Self {
        let mut cfg = cfg;
        cfg.train.deterministic |= deterministic;
        Self {
            deterministic: cfg.train.deterministic,
            cfg,
            out,
            seed,
            variant,
            started: Instant::now(),
        }
    }

    pub fn variant(&self) -> CliResult<Variant> {
        match &self.variant {
            None => Ok(Variant::Dpsformer),
            Some(v) => Variant::parse(v).ok_or_else(|| CliError::UnknownVariant(v.clone())),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seed.map_or_else(|| self.cfg.train.seeds.clone(), |s| vec![s])
    }

    pub fn wall_clock(&self) -> f64 {
        if self.deterministic {
            0.0
        } else {
            self.started.elapsed().as_secs_f64()
        }
    }

    /// Writes `manifest.json` at the root of `outputs`.
    pub fn finish(
        &self,
        command: &str,
        variant: Option<Variant>,
        seeds: Vec<u64>,
        inputs: Vec<FileEntry>,
        outputs: &Outputs,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.into(),
            variant: variant.map(|v| v.name().to_string()),
            seeds,
            code_version: env!("CARGO_PKG_VERSION").into(),
            deterministic: self.deterministic,
            config: self.cfg.clone(),
            inputs,
            outputs: outputs.entries()?,
            wall_clock_s: self.wall_clock(),
        };
        let path = outputs.root().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
