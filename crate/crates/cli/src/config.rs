//! The run configuration file (TOML). Every section has defaults, so an
//! empty file with only `schema_version = 1` is a valid config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stormtail_core::attribution::{Reduction, DEFAULT_STEPS};
use stormtail_core::data::{PeriodBoundaries, SynthConfig};
use stormtail_core::feature_quality::{ProgressiveCaps, SvmConfig};
use stormtail_core::grid::ThresholdSchema;
use stormtail_core::losses::LossConfig;
use stormtail_core::qm::DEFAULT_QUANTILES;
use stormtail_nn::train::TrainConfig;
use stormtail_nn::ModelConfig;

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub data: SynthConfig,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub schema: SchemaConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub calibrate: CalibrateConfig,
    pub attribute: AttributeConfig,
    pub report: ReportConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding `index.json` and the shards. When unset, the
    /// dataset is generated from `[data]` into `$STORMTAIL_CACHE`.
    pub path: Option<PathBuf>,
    pub shard_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            shard_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_last_year: i32,
    pub val_last_year: i32,
    /// Chronologically last fraction of the validation period held out for
    /// conformal calibration.
    pub calibration_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let b = PeriodBoundaries::default();
        Self {
            train_last_year: b.train_last_year,
            val_last_year: b.val_last_year,
            calibration_fraction: 0.5,
        }
    }
}

impl SplitConfig {
    pub fn boundaries(&self) -> PeriodBoundaries {
        PeriodBoundaries {
            train_last_year: self.train_last_year,
            val_last_year: self.val_last_year,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub thresholds: Vec<f64>,
    pub heavy_classes: Vec<usize>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let s = ThresholdSchema::default();
        Self {
            thresholds: s.thresholds().to_vec(),
            heavy_classes: s.heavy_classes().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fss_n: usize,
    pub top_fracs: Vec<f64>,
    /// Event class used to rank test samples by coverage.
    pub ranking_class: usize,
    pub n_boot: usize,
    pub ci_level: f64,
    pub sedi_clamp: Option<f64>,
    pub feature_quality: bool,
    pub caps: ProgressiveCaps,
    pub svm: SvmConfig,
    pub qm_quantiles: usize,
    /// Score the observations against themselves (pipeline self-check).
    pub observations_as_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fss_n: 5,
            top_fracs: vec![0.25, 0.10, 0.05, 0.01],
            ranking_class: 4,
            n_boot: 1000,
            ci_level: 0.95,
            sedi_clamp: None,
            feature_quality: true,
            caps: ProgressiveCaps::default(),
            svm: SvmConfig::default(),
            qm_quantiles: DEFAULT_QUANTILES,
            observations_as_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub alphas: Vec<f64>,
    /// Add the argmax class to every set (display only).
    pub force_argmax: bool,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05],
            force_argmax: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Prediction,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub steps: usize,
    pub reductions: Vec<Reduction>,
    pub mask: MaskSource,
    /// Test samples attributed, taken in chronological order.
    pub max_samples: usize,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            reductions: vec![Reduction::AllPixels, Reduction::HeavyPixels],
            mask: MaskSource::Prediction,
            max_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Eval output directories, in table order.
    pub inputs: Vec<PathBuf>,
    /// Variant whose SEDI is the reference for the SEDI improvement column.
    pub reference_variant: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            reference_variant: "raw_nwp".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory of `train`, searched for checkpoints.
    pub run: Option<PathBuf>,
    /// Explicit checkpoint file; overrides the lookup under `run`.
    pub checkpoint: Option<PathBuf>,
}

fn bad<T>(m: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(m.into()))
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::SchemaVersion {
                what: "config".into(),
                found: cfg.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.path.iter_mut().for_each(fix);
        self.paths.run.iter_mut().for_each(fix);
        self.paths.checkpoint.iter_mut().for_each(fix);
        self.report.inputs.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        self.threshold_schema()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.loss.heavy_classes != self.schema.heavy_classes {
            return bad("loss.heavy_classes must equal schema.heavy_classes");
        }
        if self.model.num_classes != self.schema.thresholds.len() + 1 {
            return bad("model.num_classes must be one more than the number of thresholds");
        }
        if self.dataset.shard_size == 0 {
            return bad("dataset.shard_size must be positive");
        }
        if !(0.0..1.0).contains(&self.split.calibration_fraction) {
            return bad("split.calibration_fraction must lie in [0, 1)");
        }
        if self.split.train_last_year >= self.split.val_last_year {
            return bad("split.train_last_year must precede split.val_last_year");
        }
        let e = &self.eval;
        if e.fss_n == 0 || e.fss_n.is_multiple_of(2) {
            return bad("eval.fss_n must be odd and positive");
        }
        if e.top_fracs.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("eval.top_fracs must lie in (0, 1]");
        }
        if e.ranking_class == 0 || e.ranking_class > self.schema.thresholds.len() {
            return bad("eval.ranking_class must be an event class in 1..=thresholds");
        }
        if e.n_boot == 0 || !(e.ci_level > 0.0 && e.ci_level < 1.0) {
            return bad("eval.n_boot must be positive and eval.ci_level in (0, 1)");
        }
        if e.qm_quantiles < 2 {
            return bad("eval.qm_quantiles must be at least 2");
        }
        if self.calibrate.alphas.is_empty() || self.calibrate.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad("calibrate.alphas must be nonempty values in (0, 1)");
        }
        if self.attribute.steps == 0 || self.attribute.max_samples == 0 || self.attribute.reductions.is_empty() {
            return bad("attribute.steps, attribute.max_samples and attribute.reductions must be nonzero");
        }
        Ok(())
    }

    pub fn threshold_schema(&self) -> CliResult<ThresholdSchema> {
        Ok(ThresholdSchema::new(
            self.schema.thresholds.clone(),
            self.schema.heavy_classes.clone(),
        )?)
    }
}
