//! Pipeline configuration (TOML). Every key has a default; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::model::{FusionParams, ModelConfig, SamplingConfig};
use crate::proposals::ProposalParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSource {
    /// Gradient-magnitude detector computed from the image.
    Baseline,
    /// Precomputed maps referenced by the manifest.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionsSection {
    pub k: usize,
}

impl Default for RegionsSection {
    fn default() -> Self {
        Self { k: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgesSection {
    pub source: EdgeSource,
}

impl Default for EdgesSection {
    fn default() -> Self {
        Self { source: EdgeSource::Baseline }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalsSection {
    pub alpha: f64,
    pub multistride: bool,
    pub min_window_area: u64,
    /// Sample only layers `1..=layers` (the `@k` variants).
    pub layers: Option<usize>,
    pub nms_overlap: Option<f64>,
    /// Keep only this many top-objectness proposals for scoring.
    pub max_scored: Option<usize>,
}

impl Default for ProposalsSection {
    fn default() -> Self {
        Self { alpha: 0.65, multistride: true, min_window_area: 100, layers: None, nms_overlap: None, max_scored: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub tau_l: f64,
    pub tau_o: f64,
    /// Accepted for completeness; no stage consumes it.
    pub tau_a: f64,
    pub negative_iou_max: f64,
    pub ordr_positives: Vec<usize>,
    pub ordr_negatives: Vec<usize>,
    pub obdr_positives: Vec<usize>,
    pub obdr_negatives: Vec<usize>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            tau_l: 0.2,
            tau_o: 0.3,
            tau_a: 6.0,
            negative_iou_max: 0.5,
            ordr_positives: vec![17; 4],
            ordr_negatives: vec![17; 4],
            obdr_positives: vec![17; 4],
            obdr_negatives: vec![25; 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSection {
    pub ordr_trees: usize,
    pub obdr_trees: usize,
    pub max_depth: usize,
    pub min_node_size: usize,
    pub max_features: Option<usize>,
    pub n_thresholds: usize,
    pub bootstrap: bool,
}

impl Default for ForestSection {
    fn default() -> Self {
        let p = ForestParams::default();
        Self {
            ordr_trees: p.n_trees,
            obdr_trees: p.n_trees,
            max_depth: p.max_depth.unwrap_or(20),
            min_node_size: p.min_node_size,
            max_features: p.max_features,
            n_thresholds: p.n_thresholds,
            bootstrap: p.bootstrap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    /// `false` scores with the primary regressor alone.
    pub enabled: bool,
    pub beta1: f64,
    pub tau_beta: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { enabled: true, beta1: 0.3, tau_beta: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// FPR at which TPR is reported.
    pub fpr: f64,
    /// Proposal budget for average recall.
    pub top_n: usize,
    pub recall_iou: f64,
    pub recall_counts: Vec<usize>,
    /// Threshold for the binary masks written by `infer`.
    pub mask_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fpr: 0.02,
            top_n: 1000,
            recall_iou: 0.5,
            recall_counts: vec![1, 10, 50, 100, 200, 500, 1000, 2000, 5000],
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub regions: RegionsSection,
    pub edges: EdgesSection,
    pub proposals: ProposalsSection,
    pub sampling: SamplingSection,
    pub forest: ForestSection,
    pub fusion: FusionSection,
    pub eval: EvalSection,
}

fn unit(key: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{key} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{key} must be at least 1")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.regions.k;
        at_least_one("regions.k", k)?;
        if !(self.proposals.alpha > 0.0 && self.proposals.alpha < 1.0) {
            return Err(Error::Config(format!("proposals.alpha must lie in (0, 1), got {}", self.proposals.alpha)));
        }
        at_least_one("proposals.min_window_area", self.proposals.min_window_area as usize)?;
        if let Some(l) = self.proposals.layers {
            if l == 0 || l > k {
                return Err(Error::Config(format!("proposals.layers must be in 1..={k}, got {l}")));
            }
        }
        if let Some(o) = self.proposals.nms_overlap {
            unit("proposals.nms_overlap", o)?;
        }
        if let Some(m) = self.proposals.max_scored {
            at_least_one("proposals.max_scored", m)?;
        }
        let s = &self.sampling;
        unit("sampling.tau_l", s.tau_l)?;
        unit("sampling.tau_o", s.tau_o)?;
        unit("sampling.negative_iou_max", s.negative_iou_max)?;
        if !(s.tau_a.is_finite() && s.tau_a >= 0.0) {
            return Err(Error::Config(format!("sampling.tau_a must be finite and non-negative, got {}", s.tau_a)));
        }
        for (key, v) in [
            ("sampling.ordr_positives", &s.ordr_positives),
            ("sampling.ordr_negatives", &s.ordr_negatives),
            ("sampling.obdr_positives", &s.obdr_positives),
            ("sampling.obdr_negatives", &s.obdr_negatives),
        ] {
            if v.len() != k {
                return Err(Error::Config(format!("{key} needs {k} entries (one per region), got {}", v.len())));
            }
        }
        let f = &self.forest;
        at_least_one("forest.ordr_trees", f.ordr_trees)?;
        at_least_one("forest.obdr_trees", f.obdr_trees)?;
        at_least_one("forest.max_depth", f.max_depth)?;
        at_least_one("forest.min_node_size", f.min_node_size)?;
        at_least_one("forest.n_thresholds", f.n_thresholds)?;
        if let Some(m) = f.max_features {
            at_least_one("forest.max_features", m)?;
        }
        if !(self.fusion.beta1.is_finite() && self.fusion.beta1 >= 0.0) {
            return Err(Error::Config(format!(
                "fusion.beta1 must be finite and non-negative, got {}",
                self.fusion.beta1
            )));
        }
        if !(self.fusion.tau_beta > 0.0 && self.fusion.tau_beta <= 1.0) {
            return Err(Error::Config(format!("fusion.tau_beta must lie in (0, 1], got {}", self.fusion.tau_beta)));
        }
        unit("eval.fpr", self.eval.fpr)?;
        unit("eval.recall_iou", self.eval.recall_iou)?;
        unit("eval.mask_threshold", self.eval.mask_threshold)?;
        at_least_one("eval.top_n", self.eval.top_n)?;
        Ok(())
    }

    pub fn proposal_params(&self) -> ProposalParams {
        ProposalParams {
            alpha: self.proposals.alpha,
            multistride: self.proposals.multistride,
            min_window_area: self.proposals.min_window_area,
            layers: self.proposals.layers,
            nms_overlap: self.proposals.nms_overlap,
        }
    }

    /// Fusion parameters in effect; the ORDR-only variant when disabled.
    pub fn fusion_params(&self) -> FusionParams {
        if self.fusion.enabled {
            FusionParams { beta1: self.fusion.beta1, tau_beta: self.fusion.tau_beta }
        } else {
            FusionParams::ORDR_ONLY
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let s = &self.sampling;
        let sampling = |n_plus: &[usize], n_minus: &[usize]| SamplingConfig {
            n_plus: n_plus.to_vec(),
            n_minus: n_minus.to_vec(),
            tau_l: s.tau_l,
            tau_o: s.tau_o,
            negative_iou_max: s.negative_iou_max,
        };
        let f = &self.forest;
        let forest = |n_trees| ForestParams {
            n_trees,
            max_depth: Some(f.max_depth),
            min_node_size: f.min_node_size,
            max_features: f.max_features,
            n_thresholds: f.n_thresholds,
            bootstrap: f.bootstrap,
        };
        ModelConfig {
            ordr_sampling: sampling(&s.ordr_positives, &s.ordr_negatives),
            obdr_sampling: sampling(&s.obdr_positives, &s.obdr_negatives),
            ordr_forest: forest(f.ordr_trees),
            obdr_forest: forest(f.obdr_trees),
            fusion: self.fusion_params(),
        }
    }
}
