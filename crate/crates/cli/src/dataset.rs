//! Locating, generating and splitting the dataset.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use stormtail_core::data::{
    generate_synthetic, load_dataset, save_dataset, split_by_period, DatasetIndex, Sample, INDEX_FILE,
};
use stormtail_core::grid::ThresholdSchema;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{entry, FileEntry};

pub const CACHE_ENV: &str = "STORMTAIL_CACHE";

pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    /// Validation samples used for checkpoint selection.
    pub val: Vec<usize>,
    /// Validation samples held out for conformal calibration.
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn pick(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Index and shard files with hashes, for manifests.
    pub fn files(&self) -> CliResult<Vec<FileEntry>> {
        let mut files = vec![self.dir.join(INDEX_FILE)];
        files.extend(self.index.shards.iter().map(|s| self.dir.join(&s.file)));
        files.iter().map(|f| entry(f, f.display().to_string())).collect()
    }
}

/// Key of the `[data]` and `[schema]` sections, naming the cache entry.
pub fn cache_key(cfg: &Config) -> CliResult<String> {
    let text = serde_json::to_string(&(&cfg.data, &cfg.schema, cfg.dataset.shard_size))?;
    Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
}

pub fn generate(cfg: &Config, schema: &ThresholdSchema, dir: &Path) -> CliResult<DatasetIndex> {
    let samples = generate_synthetic(&cfg.data, schema)?;
    Ok(save_dataset(&samples, schema, dir, cfg.dataset.shard_size)?)
}

fn locate(cfg: &Config, schema: &ThresholdSchema) -> CliResult<PathBuf> {
    if let Some(p) = &cfg.dataset.path {
        if !p.join(INDEX_FILE).is_file() {
            return Err(CliError::Data(format!("no dataset index at {}", p.join(INDEX_FILE).display())));
        }
        return Ok(p.clone());
    }
    let Some(cache) = std::env::var_os(CACHE_ENV) else {
        return Err(CliError::Config(format!(
            "no dataset: set dataset.path or the {CACHE_ENV} environment variable"
        )));
    };
    let dir = PathBuf::from(cache).join(format!("synthetic-{}", cache_key(cfg)?));
    if !dir.join(INDEX_FILE).is_file() {
        log::info!("generating dataset into cache {}", dir.display());
        generate(cfg, schema, &dir)?;
    }
    Ok(dir)
}

pub fn open(cfg: &Config) -> CliResult<Dataset> {
    let schema = cfg.threshold_schema()?;
    let dir = locate(cfg, &schema)?;
    let (index, samples) = load_dataset(&dir)?;
    if index.thresholds != schema {
        return Err(CliError::Data(format!(
            "dataset thresholds {:?} differ from the configured {:?}",
            index.thresholds.thresholds(),
            schema.thresholds()
        )));
    }
    let split = split_by_period(&samples, cfg.split.boundaries(), cfg.data.seed)?;
    let n_cal = (cfg.split.calibration_fraction * split.val.len() as f64).round() as usize;
    let (val, calib) = split.val.split_at(split.val.len() - n_cal);
    Ok(Dataset {
        dir,
        index,
        samples,
        train: split.train,
        val: val.to_vec(),
        calib: calib.to_vec(),
        test: split.test,
    })
}
