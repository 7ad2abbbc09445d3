//! Named experiment variants: the full model, its ablations, long-tail
//! baselines and the two statistical references.

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dpsformer,
    BackboneWce,
    BackboneLa,
    BackboneBlv,
    BackboneFocal,
    BackboneResample,
    HrfOnly,
    HrfDualpath,
    Qm,
    RawNwp,
}

/// Training objective of a learned variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Two-branch loss: LA cross-entropy plus Dice on the main head, WCE with
    /// BLV noise plus Dice on the spatial head.
    DualLoss,
    Wce,
    LogitAdjustedCe,
    BlvCe,
    Focal,
    /// Unweighted cross-entropy over batches oversampled for heavy samples.
    ResampledCe,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Dpsformer,
        Variant::BackboneWce,
        Variant::BackboneLa,
        Variant::BackboneBlv,
        Variant::BackboneFocal,
        Variant::BackboneResample,
        Variant::HrfOnly,
        Variant::HrfDualpath,
        Variant::Qm,
        Variant::RawNwp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dpsformer => "dpsformer",
            Variant::BackboneWce => "backbone_wce",
            Variant::BackboneLa => "backbone_la",
            Variant::BackboneBlv => "backbone_blv",
            Variant::BackboneFocal => "backbone_focal",
            Variant::BackboneResample => "backbone_resample",
            Variant::HrfOnly => "hrf_only",
            Variant::HrfDualpath => "hrf_dualpath",
            Variant::Qm => "qm",
            Variant::RawNwp => "raw_nwp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Config delta relative to the full model, as reported in run manifests.
    pub fn description(self) -> &'static str {
        match self {
            Variant::Dpsformer => "dual path, offset resampling, dual loss",
            Variant::BackboneWce => "backbone only, weighted cross-entropy",
            Variant::BackboneLa => "backbone only, logit-adjusted cross-entropy",
            Variant::BackboneBlv => "backbone only, cross-entropy on BLV-perturbed logits",
            Variant::BackboneFocal => "backbone only, focal loss",
            Variant::BackboneResample => "backbone only, cross-entropy with heavy-sample oversampling",
            Variant::HrfOnly => "fixed high-resolution branch only, weighted cross-entropy",
            Variant::HrfDualpath => "dual path, offset resampling, weighted cross-entropy on the main head",
            Variant::Qm => "quantile-mapped NWP precipitation, classified",
            Variant::RawNwp => "raw NWP precipitation, classified",
        }
    }

    pub fn architecture(self) -> Option<Architecture> {
        match self {
            Variant::Dpsformer | Variant::HrfDualpath => Some(Architecture::DualPath),
            Variant::BackboneWce
            | Variant::BackboneLa
            | Variant::BackboneBlv
            | Variant::BackboneFocal
            | Variant::BackboneResample => Some(Architecture::BackboneOnly),
            Variant::HrfOnly => Some(Architecture::SpatialOnly),
            Variant::Qm | Variant::RawNwp => None,
        }
    }

    pub fn objective(self) -> Option<Objective> {
        match self {
            Variant::Dpsformer => Some(Objective::DualLoss),
            Variant::BackboneWce | Variant::HrfOnly | Variant::HrfDualpath => Some(Objective::Wce),
            Variant::BackboneLa => Some(Objective::LogitAdjustedCe),
            Variant::BackboneBlv => Some(Objective::BlvCe),
            Variant::BackboneFocal => Some(Objective::Focal),
            Variant::BackboneResample => Some(Objective::ResampledCe),
            Variant::Qm | Variant::RawNwp => None,
        }
    }

    /// Whether the objective is trained on logit-adjusted scores.
    pub fn uses_logit_adjustment(self) -> bool {
        matches!(self.objective(), Some(Objective::DualLoss | Objective::LogitAdjustedCe))
    }

    pub fn is_trainable(self) -> bool {
        self.architecture().is_some()
    }

    /// `base` with this variant's architecture, or `None` for the
    /// statistical references.
    pub fn model_config(self, base: &ModelConfig) -> Option<ModelConfig> {
        self.architecture().map(|a| ModelConfig {
            architecture: a,
            ..base.clone()
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
