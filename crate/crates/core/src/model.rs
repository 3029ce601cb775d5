//! Training-sample selection, the two dissimilarity regressors, and score fusion.
//!
//! ORDR (obstacle-road) is the primary regressor and gates proposals; OBDR
//! (obstacle-background) adds a weighted bonus to the ones that pass.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureVector};
use crate::forest::{train_forest, Forest, ForestParams};
use crate::geom::{iou, Rect};
use crate::mlregions::{MLRegionSet, VerticalRanges};
use crate::proposals::{Category, Proposal};
use crate::rng::{derive_seed, stream_rng};

pub const MODEL_FORMAT: &str = "tinyobs-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Rejection-resampling budget for the negative objectness constraint.
const MAX_NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Negatives drawn from road and obstacle proposals.
    Ordr,
    /// Negatives drawn from background and obstacle proposals.
    Obdr,
}

impl Role {
    pub fn eligible(self, c: Category) -> bool {
        match self {
            Role::Ordr => c != Category::Background,
            Role::Obdr => c != Category::Road,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Positives per vertical range.
    pub n_plus: Vec<usize>,
    /// Negatives per vertical range.
    pub n_minus: Vec<usize>,
    /// Minimum fraction of negatives whose objectness exceeds `tau_o`.
    pub tau_l: f64,
    pub tau_o: f64,
    /// Negatives must overlap every obstacle by less than this IoU.
    pub negative_iou_max: f64,
}

impl SamplingConfig {
    pub fn uniform(k: usize, n_plus: usize, n_minus: usize) -> Self {
        Self { n_plus: vec![n_plus; k], n_minus: vec![n_minus; k], tau_l: 0.2, tau_o: 0.3, negative_iou_max: 0.5 }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_plus.len() != k || self.n_minus.len() != k {
            return Err(Error::Config(format!(
                "sampling counts need {k} entries (got n_plus {}, n_minus {})",
                self.n_plus.len(),
                self.n_minus.len()
            )));
        }
        for (name, v) in [("tau_l", self.tau_l), ("tau_o", self.tau_o), ("negative_iou_max", self.negative_iou_max)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub beta1: f64,
    pub tau_beta: f64,
}

impl FusionParams {
    /// Scores from the primary regressor alone, gated at the minimum.
    pub const ORDR_ONLY: FusionParams = FusionParams { beta1: 0.0, tau_beta: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            return Err(Error::Config(format!("beta1 must be finite and non-negative, got {}", self.beta1)));
        }
        if !(self.tau_beta > 0.0 && self.tau_beta <= 1.0) {
            return Err(Error::Config(format!("tau_beta must lie in (0, 1], got {}", self.tau_beta)));
        }
        Ok(())
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { beta1: 0.3, tau_beta: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ordr_sampling: SamplingConfig,
    pub obdr_sampling: SamplingConfig,
    pub ordr_forest: ForestParams,
    pub obdr_forest: ForestParams,
    pub fusion: FusionParams,
}

impl ModelConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            ordr_sampling: SamplingConfig::uniform(k, 17, 17),
            obdr_sampling: SamplingConfig::uniform(k, 17, 25),
            ordr_forest: ForestParams::default(),
            obdr_forest: ForestParams::default(),
            fusion: FusionParams::default(),
        }
    }

    pub fn sampling(&self, role: Role) -> &SamplingConfig {
        match role {
            Role::Ordr => &self.ordr_sampling,
            Role::Obdr => &self.obdr_sampling,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.ordr_sampling.validate(k)?;
        self.obdr_sampling.validate(k)?;
        self.ordr_forest.validate()?;
        self.obdr_forest.validate()?;
        self.fusion.validate()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_k(4)
    }
}

/// Proposal indices grouped by the vertical range of their bottom row.
pub fn partition_by_vertical_range(proposals: &[Proposal], ranges: &VerticalRanges) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); ranges.k()];
    for (i, p) in proposals.iter().enumerate() {
        parts[ranges.range_of(p.rect.bottom())].push(i);
    }
    parts
}

/// Largest IoU between `rect` and any ground-truth box (0 when there are none).
pub fn max_iou(rect: &Rect, gt: &[Rect]) -> f64 {
    gt.iter().map(|g| iou(rect, g)).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    /// Index into the image's proposal list.
    pub index: usize,
    pub target: f64,
    pub positive: bool,
}

/// Picks `quota` negatives out of `pool`, trying to get `required` of them
/// from `qualifying` (a subset of `pool`, by position).
fn draw_negatives<R: Rng>(
    pool: &[usize],
    qualifies: &[bool],
    quota: usize,
    required: usize,
    rng: &mut R,
) -> Vec<usize> {
    let qualifying: Vec<usize> = (0..pool.len()).filter(|&i| qualifies[i]).collect();
    if qualifying.len() >= required {
        for _ in 0..MAX_NEGATIVE_ATTEMPTS {
            let pick = sample_indices(rng, pool.len(), quota).into_vec();
            if pick.iter().filter(|&&i| qualifies[i]).count() >= required {
                return pick.into_iter().map(|i| pool[i]).collect();
            }
        }
    } else {
        log::debug!("only {} of {} required high-objectness negatives available", qualifying.len(), required);
    }
    // best effort: as many qualifying ones as needed, the rest uniformly
    let take = required.min(qualifying.len());
    let mut chosen: Vec<usize> =
        sample_indices(rng, qualifying.len(), take).into_iter().map(|j| qualifying[j]).collect();
    let mut used = vec![false; pool.len()];
    for &i in &chosen {
        used[i] = true;
    }
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !used[i]).collect();
    chosen.extend(sample_indices(rng, rest.len(), quota - take).into_iter().map(|j| rest[j]));
    chosen.into_iter().map(|i| pool[i]).collect()
}

/// Training samples of one role from one image's labeled proposals.
///
/// Per range: the `n_plus` proposals overlapping an obstacle the most, then
/// `n_minus` random eligible proposals with low obstacle overlap. Targets are
/// the max IoU with any ground-truth box.
pub fn select_samples(
    proposals: &[Proposal],
    partition: &[Vec<usize>],
    gt: &[Rect],
    role: Role,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    cfg.validate(partition.len())?;
    let mut out = Vec::new();
    for (k, members) in partition.iter().enumerate() {
        let mut rng = stream_rng(seed, k as u64);
        let overlap: Vec<f64> = members.iter().map(|&i| max_iou(&proposals[i].rect, gt)).collect();

        let mut by_overlap: Vec<usize> = (0..members.len()).filter(|&j| overlap[j] > 0.0).collect();
        // stable sort keeps the objectness ranking among equal overlaps
        by_overlap.sort_by(|&a, &b| overlap[b].total_cmp(&overlap[a]));
        by_overlap.truncate(cfg.n_plus[k]);
        let mut is_positive = vec![false; members.len()];
        for &j in &by_overlap {
            is_positive[j] = true;
            out.push(TrainingSample { index: members[j], target: overlap[j], positive: true });
        }

        let mut pool = Vec::new();
        for (j, &i) in members.iter().enumerate() {
            let category =
                proposals[i].category.ok_or_else(|| Error::Contract(format!("proposal {i} has no category label")))?;
            if !is_positive[j] && overlap[j] < cfg.negative_iou_max && role.eligible(category) {
                pool.push(j);
            }
        }
        let quota = cfg.n_minus[k].min(pool.len());
        let required = ((cfg.tau_l * quota as f64) - 1e-9).ceil().max(0.0) as usize;
        let qualifies: Vec<bool> = pool.iter().map(|&j| proposals[members[j]].objectness > cfg.tau_o).collect();
        for j in draw_negatives(&pool, &qualifies, quota, required, &mut rng) {
            out.push(TrainingSample { index: members[j], target: overlap[j], positive: false });
        }
    }
    Ok(out)
}

/// Feature/target pairs of one image for both regressors.
#[derive(Clone, Debug, Default)]
pub struct ImageSamples {
    pub ordr: Vec<(FeatureVector, f64)>,
    pub obdr: Vec<(FeatureVector, f64)>,
}

/// Selects and describes the training samples of one image. Returns `None`
/// (with a warning) for images without ground truth.
pub fn collect_image_samples(
    ctx: &FeatureContext,
    proposals: &[Proposal],
    gt: &[Rect],
    ranges: &VerticalRanges,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Option<ImageSamples>> {
    if gt.is_empty() {
        log::warn!("image without ground-truth obstacles skipped for training");
        return Ok(None);
    }
    let partition = partition_by_vertical_range(proposals, ranges);
    let mut out = ImageSamples::default();
    for (stream, role) in [Role::Ordr, Role::Obdr].into_iter().enumerate() {
        let picked =
            select_samples(proposals, &partition, gt, role, cfg.sampling(role), derive_seed(seed, stream as u64))?;
        let described: Vec<(FeatureVector, f64)> =
            picked.iter().map(|s| Ok((ctx.describe(&proposals[s.index])?, s.target))).collect::<Result<_>>()?;
        match role {
            Role::Ordr => out.ordr = described,
            Role::Obdr => out.obdr = described,
        }
    }
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub regions: MLRegionSet,
    pub ordr: Forest,
    pub obdr: Forest,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    version: u32,
    config: ModelConfig,
    regions: MLRegionSet,
    ordr: Forest,
    obdr: Forest,
}

fn split(set: &[(FeatureVector, f64)]) -> (Vec<Vec<f64>>, Vec<f64>) {
    set.iter().map(|(v, t)| (v.0.to_vec(), *t)).unzip()
}

/// Trains ORDR and OBDR on the pooled samples of all training images.
pub fn train_model(
    samples: &[ImageSamples],
    regions: MLRegionSet,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate(regions.k())?;
    let ordr_set: Vec<_> = samples.iter().flat_map(|s| s.ordr.iter().cloned()).collect();
    let obdr_set: Vec<_> = samples.iter().flat_map(|s| s.obdr.iter().cloned()).collect();
    if ordr_set.is_empty() || obdr_set.is_empty() {
        return Err(Error::Config(format!(
            "empty training set (ORDR {} samples, OBDR {} samples)",
            ordr_set.len(),
            obdr_set.len()
        )));
    }
    log::info!("training ORDR on {} samples, OBDR on {} samples", ordr_set.len(), obdr_set.len());
    let (x, y) = split(&ordr_set);
    let ordr = train_forest(&x, &y, &cfg.ordr_forest, derive_seed(seed, 0))?;
    let (x, y) = split(&obdr_set);
    let obdr = train_forest(&x, &y, &cfg.obdr_forest, derive_seed(seed, 1))?;
    Ok(TrainedModel { config: cfg.clone(), regions, ordr, obdr })
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            regions: self.regions.clone(),
            ordr: self.ordr.clone(),
            obdr: self.obdr.clone(),
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: Option<String>,
            version: Option<u32>,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if header.format.as_deref() != Some(MODEL_FORMAT) {
            return Err(Error::Format(format!("not a model file (format tag {:?})", header.format)));
        }
        if header.version != Some(MODEL_FORMAT_VERSION) {
            return Err(Error::Format(format!(
                "model version {:?} (expected {})",
                header.version, MODEL_FORMAT_VERSION
            )));
        }
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        Ok(Self { config: doc.config, regions: doc.regions, ordr: doc.ordr, obdr: doc.obdr })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Gate value: the score at descending rank `ceil(tau_beta * M)`.
pub fn compute_beta2(scores: &[f64], tau_beta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("no primary scores to derive beta2 from".into()));
    }
    if !(tau_beta > 0.0 && tau_beta <= 1.0) {
        return Err(Error::Config(format!("tau_beta must lie in (0, 1], got {tau_beta}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((tau_beta * sorted.len() as f64) - 1e-9).ceil().clamp(1.0, sorted.len() as f64) as usize;
    Ok(sorted[rank - 1])
}

pub fn fuse(f_or: f64, f_ob: f64, beta1: f64, beta2: f64) -> f64 {
    if f_or > beta2 {
        f_or + beta1 * f_ob
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub f_or: f64,
    pub f_ob: f64,
    pub score: f64,
}

/// Raw regressor outputs `(F_or, F_ob)` per proposal.
pub fn predict_pairs(model: &TrainedModel, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
    let rows: Vec<&[f64]> = features.iter().map(FeatureVector::as_slice).collect();
    let f_or = model.ordr.predict_batch(&rows)?;
    let f_ob = model.obdr.predict_batch(&rows)?;
    Ok(f_or.into_iter().zip(f_ob).collect())
}

/// Applies the per-image gate and fusion, then ranks by final score
/// (ties by objectness rank order, then box).
pub fn fuse_scores(proposals: &[Proposal], pairs: &[(f64, f64)], fusion: &FusionParams) -> Result<Vec<ScoredProposal>> {
    fusion.validate()?;
    if proposals.len() != pairs.len() {
        return Err(Error::Contract(format!("{} proposals but {} score pairs", proposals.len(), pairs.len())));
    }
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let primary: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let beta2 = compute_beta2(&primary, fusion.tau_beta)?;
    let mut out: Vec<ScoredProposal> = proposals
        .iter()
        .zip(pairs)
        .map(|(p, &(f_or, f_ob))| ScoredProposal {
            proposal: p.clone(),
            f_or,
            f_ob,
            score: fuse(f_or, f_ob, fusion.beta1, beta2),
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.proposal.objectness.total_cmp(&a.proposal.objectness))
            .then_with(|| a.proposal.rect.cmp(&b.proposal.rect))
    });
    Ok(out)
}

/// Predicts, gates and fuses one image's proposals using the model's fusion
/// parameters.
pub fn score_proposals(
    model: &TrainedModel,
    proposals: &[Proposal],
    features: &[FeatureVector],
) -> Result<Vec<ScoredProposal>> {
    if proposals.len() != features.len() {
        return Err(Error::Contract(format!("{} proposals but {} feature vectors", proposals.len(), features.len())));
    }
    let pairs = predict_pairs(model, features)?;
    fuse_scores(proposals, &pairs, &model.config.fusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_DIM;
    use crate::mlregions::vertical_ranges;

    fn prop(x: u32, y: u32, w: u32, h: u32, objectness: f64, category: Category) -> Proposal {
        Proposal { rect: Rect::new(x, y, w, h), objectness, layer: 1, category: Some(category) }
    }

    #[test]
    fn beta2_rank_rule() {
        assert_eq!(compute_beta2(&[0.9, 0.7, 0.5, 0.3], 0.5).unwrap(), 0.7);
        assert_eq!(compute_beta2(&[0.3, 0.9, 0.5, 0.7], 1.0).unwrap(), 0.3);
        assert_eq!(compute_beta2(&[0.4; 5], 0.5).unwrap(), 0.4);
        assert!(matches!(compute_beta2(&[], 0.5), Err(Error::Config(_))));
        assert!(matches!(compute_beta2(&[0.1], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_table() {
        let cases = [
            (0.8, 0.5, 0.3, 0.7, 0.8 + 0.3 * 0.5),
            (0.6, 0.5, 0.3, 0.7, 0.0),
            (0.7, 0.5, 0.3, 0.7, 0.0),
            (0.8, 0.5, 0.0, 0.7, 0.8),
            (0.8, 0.0, 0.3, 0.7, 0.8),
        ];
        for (f_or, f_ob, b1, b2, want) in cases {
            assert_eq!(fuse(f_or, f_ob, b1, b2), want);
        }
        assert!((fuse(0.8, 0.5, 0.3, 0.7) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn gate_with_equal_primaries_passes_nothing() {
        let ps: Vec<Proposal> = (0..4).map(|i| prop(i, 0, 2, 2, 0.1, Category::Road)).collect();
        let out = fuse_scores(&ps, &[(0.5, 0.9); 4], &FusionParams::default()).unwrap();
        assert!(out.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn gate_monotone_in_tau_beta_and_independent_of_beta1() {
        let ps: Vec<Proposal> = (0..40).map(|i| prop(i, 0, 2, 2, 0.1, Category::Road)).collect();
        let pairs: Vec<(f64, f64)> = (0..40).map(|i| (((i * 7) % 40) as f64 / 40.0, (i % 5) as f64 / 5.0)).collect();
        let passed = |f: FusionParams| fuse_scores(&ps, &pairs, &f).unwrap().iter().filter(|s| s.score > 0.0).count();
        let mut last = usize::MAX;
        for t in [1.0, 0.8, 0.5, 0.3, 0.1] {
            let n = passed(FusionParams { beta1: 0.3, tau_beta: t });
            assert!(n <= last);
            assert_eq!(n, passed(FusionParams { beta1: 2.0, tau_beta: t }));
            last = n;
        }
        for s in fuse_scores(&ps, &pairs, &FusionParams::default()).unwrap() {
            if s.score > 0.0 {
                assert!(s.score >= s.f_or);
            }
        }
    }

    fn ranges() -> VerticalRanges {
        let set = MLRegionSet::new(vec![Rect::new(0, 20, 100, 80), Rect::new(10, 20, 80, 40)], 100, 100).unwrap();
        vertical_ranges(&set)
    }

    #[test]
    fn partition_boundaries() {
        let r = ranges();
        assert_eq!(r.boundaries, vec![100, 60, 20]);
        let ps = vec![
            prop(0, 50, 10, 10, 0.0, Category::Road), // bottom 60, exactly y_2
            prop(0, 70, 10, 10, 0.0, Category::Road), // bottom 80
            prop(0, 0, 5, 5, 0.0, Category::Road),    // above the top boundary
        ];
        let parts = partition_by_vertical_range(&ps, &r);
        assert_eq!(parts, vec![vec![1], vec![0, 2]]);
        let above: Vec<Proposal> = (0..5).map(|i| prop(i, 0, 3, 3, 0.0, Category::Road)).collect();
        assert_eq!(partition_by_vertical_range(&above, &r)[1].len(), 5);
    }

    fn negatives_scene(n_eligible: usize, qualifying_every: usize) -> (Vec<Proposal>, Vec<Rect>) {
        let gt = vec![Rect::new(0, 90, 10, 10)];
        let mut ps = vec![prop(0, 90, 10, 10, 0.9, Category::Obstacle)];
        for i in 0..n_eligible as u32 {
            let o = if (i as usize).is_multiple_of(qualifying_every) { 0.5 } else { 0.1 };
            ps.push(prop(20 + (i % 70), 70 + i / 70, 5, 5, o, Category::Road));
        }
        // background proposals are never ORDR negatives
        for i in 0..30 {
            ps.push(prop(20 + i, 80, 6, 6, 0.9, Category::Background));
        }
        (ps, gt)
    }

    #[test]
    fn negative_quota_and_objectness_constraint() {
        let (ps, gt) = negatives_scene(100, 10);
        let part = vec![(0..ps.len()).collect::<Vec<_>>()];
        let cfg = SamplingConfig::uniform(1, 17, 17);
        for seed in 0..20 {
            let s = select_samples(&ps, &part, &gt, Role::Ordr, &cfg, seed).unwrap();
            let neg: Vec<_> = s.iter().filter(|t| !t.positive).collect();
            assert_eq!(neg.len(), 17);
            assert!(neg.iter().filter(|t| ps[t.index].objectness > 0.3).count() >= 4);
            assert!(neg.iter().all(|t| ps[t.index].category != Some(Category::Background)));
            let pos: Vec<_> = s.iter().filter(|t| t.positive).collect();
            assert_eq!(pos.len(), 1);
            assert_eq!(pos[0].target, 1.0);
        }
    }

    #[test]
    fn shortfalls_take_everything() {
        let (ps, gt) = negatives_scene(3, 1);
        let part = vec![(0..ps.len()).collect::<Vec<_>>()];
        let s = select_samples(&ps, &part, &gt, Role::Ordr, &SamplingConfig::uniform(1, 17, 17), 1).unwrap();
        assert_eq!(s.iter().filter(|t| !t.positive).count(), 3);
        let s = select_samples(&ps, &part, &gt, Role::Obdr, &SamplingConfig::uniform(1, 17, 25), 1).unwrap();
        let neg: Vec<_> = s.iter().filter(|t| !t.positive).collect();
        assert_eq!(neg.len(), 25);
        assert!(neg.iter().all(|t| ps[t.index].category != Some(Category::Road)));
    }

    #[test]
    fn unreachable_constraint_is_best_effort() {
        // only 2 qualifying of 100, constraint asks for 4
        let (ps, gt) = negatives_scene(100, 50);
        let part = vec![(0..ps.len()).collect::<Vec<_>>()];
        let s = select_samples(&ps, &part, &gt, Role::Ordr, &SamplingConfig::uniform(1, 17, 17), 3).unwrap();
        let neg: Vec<_> = s.iter().filter(|t| !t.positive).collect();
        assert_eq!(neg.len(), 17);
        assert_eq!(neg.iter().filter(|t| ps[t.index].objectness > 0.3).count(), 2);
    }

    #[test]
    fn unlabeled_proposals_rejected() {
        let mut ps = vec![prop(0, 0, 4, 4, 0.1, Category::Road)];
        ps[0].category = None;
        let r = select_samples(
            &ps,
            &[vec![0]],
            &[Rect::new(50, 50, 3, 3)],
            Role::Ordr,
            &SamplingConfig::uniform(1, 1, 1),
            0,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn toy_samples() -> Vec<ImageSamples> {
        let mut s = ImageSamples::default();
        for i in 0..40 {
            let mut v = [0.0; FEATURE_DIM];
            v[0] = i as f64 / 40.0;
            let t = if i > 20 { 0.8 } else { 0.1 };
            s.ordr.push((FeatureVector(v), t));
            s.obdr.push((FeatureVector(v), 1.0 - t));
        }
        vec![s]
    }

    #[test]
    fn model_round_trip_and_determinism() {
        let regions = MLRegionSet::new(vec![Rect::new(0, 0, 10, 10)], 10, 10).unwrap();
        let mut cfg = ModelConfig::with_k(1);
        cfg.ordr_forest.n_trees = 5;
        cfg.obdr_forest.n_trees = 5;
        let a = train_model(&toy_samples(), regions.clone(), &cfg, 9).unwrap();
        let b = train_model(&toy_samples(), regions.clone(), &cfg, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = TrainedModel::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert!(matches!(TrainedModel::from_json("{\"format\":\"x\"}"), Err(Error::Format(_))));
        assert!(matches!(train_model(&[], regions, &cfg, 9), Err(Error::Config(_))));
    }

    #[test]
    fn scoring_checks_dimensions() {
        let regions = MLRegionSet::new(vec![Rect::new(0, 0, 10, 10)], 10, 10).unwrap();
        let mut cfg = ModelConfig::with_k(1);
        cfg.ordr_forest.n_trees = 3;
        cfg.obdr_forest.n_trees = 3;
        let m = train_model(&toy_samples(), regions, &cfg, 1).unwrap();
        let ps: Vec<Proposal> = (0..6).map(|i| prop(i, 0, 2, 2, 0.1, Category::Road)).collect();
        let feats: Vec<FeatureVector> = (0..6)
            .map(|i| {
                let mut v = [0.0; FEATURE_DIM];
                v[0] = i as f64 / 6.0;
                FeatureVector(v)
            })
            .collect();
        let a = score_proposals(&m, &ps, &feats).unwrap();
        assert_eq!(a, score_proposals(&m, &ps, &feats).unwrap());
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(score_proposals(&m, &ps, &feats[..3]), Err(Error::Contract(_))));
    }
}
