//! End-to-end stages over a dataset manifest.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EdgeSource, PipelineConfig};
use crate::edges::{detect_edges_baseline, enhance_edges, load_edge_map, EdgeMap, EnhancedEdgeMap};
use crate::error::{Error, Result};
use crate::eval::RankedImage;
use crate::features::{FeatureContext, FeatureVector};
use crate::geom::Rect;
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::masks::SceneMasks;
use crate::mlregions::{fit_regions, vertical_ranges, MLRegionSet, ObstacleAnnotation};
use crate::model::{
    collect_image_samples, fuse_scores, predict_pairs, train_model, FusionParams, ScoredProposal, TrainedModel,
};
use crate::probmap::{build_probability_map, ProbabilityMap};
use crate::proposals::{generate_proposals, label_proposal, Proposal};
use crate::rng::derive_seed;

/// Stream offset separating per-image training seeds from other uses of the
/// run seed.
const IMAGE_SEED_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub id: String,
    pub rgb: RgbImage,
    pub masks: SceneMasks,
    pub gt: Vec<Rect>,
    pub edge: EdgeMap,
}

impl LoadedImage {
    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }
}

pub fn load_record(manifest: &DatasetManifest, rec: &ManifestRecord, source: EdgeSource) -> Result<LoadedImage> {
    let path = manifest.resolve(&rec.image);
    let rgb = image::open(&path).map_err(|e| Error::image(&path, e))?.to_rgb8();
    let obstacle = rec.obstacle_mask.as_ref().map(|p| manifest.resolve(p));
    let masks = SceneMasks::load(&manifest.resolve(&rec.label_mask), obstacle.as_deref())?;
    if (masks.width(), masks.height()) != rgb.dimensions() {
        return Err(Error::InvalidInput(format!("record {}: masks and image differ in size", rec.id)));
    }
    let edge = match source {
        EdgeSource::Baseline => detect_edges_baseline(&rgb)?,
        EdgeSource::File => {
            let p = rec.edge_map.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("record {} has no edge_map but edges.source = file", rec.id))
            })?;
            let e = load_edge_map(&manifest.resolve(p))?;
            if (e.width(), e.height()) != rgb.dimensions() {
                return Err(Error::InvalidInput(format!("record {}: edge map and image differ in size", rec.id)));
            }
            e
        }
    };
    Ok(LoadedImage { id: rec.id.clone(), rgb, masks, gt: rec.obstacles.clone(), edge })
}

pub fn load_split(manifest: &DatasetManifest, split: Split, source: EdgeSource) -> Result<Vec<LoadedImage>> {
    let records: Vec<&ManifestRecord> = manifest.split(split).collect();
    records.par_iter().map(|r| load_record(manifest, r, source)).collect()
}

/// Obstacle annotations of one split, read from the manifest without
/// decoding the images.
pub fn manifest_annotations(manifest: &DatasetManifest, split: Split) -> Result<Vec<ObstacleAnnotation>> {
    let mut out = Vec::new();
    for r in manifest.split(split) {
        let path = manifest.resolve(&r.image);
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::image(&path, e))?;
        out.extend(r.obstacles.iter().map(|&rect| ObstacleAnnotation {
            image_id: r.id.clone(),
            rect,
            image_width: w,
            image_height: h,
        }));
    }
    Ok(out)
}

/// ML regions from the obstacles of the given images.
pub fn fit_regions_from(images: &[LoadedImage], k: usize, seed: u64) -> Result<MLRegionSet> {
    let annotations: Vec<ObstacleAnnotation> = images
        .iter()
        .flat_map(|img| {
            img.gt.iter().map(|&rect| ObstacleAnnotation {
                image_id: img.id.clone(),
                rect,
                image_width: img.width(),
                image_height: img.height(),
            })
        })
        .collect();
    fit_regions(&annotations, k, seed)
}

/// Enhanced edges and the ranked initial proposals of one image, truncated
/// to `proposals.max_scored` when set.
pub fn propose(
    img: &LoadedImage,
    regions: &MLRegionSet,
    cfg: &PipelineConfig,
) -> Result<(EnhancedEdgeMap, Vec<Proposal>)> {
    if (regions.image_width(), regions.image_height()) != (img.width(), img.height()) {
        return Err(Error::InvalidInput(format!(
            "image {} is {}x{} but the regions were fitted on {}x{} images",
            img.id,
            img.width(),
            img.height(),
            regions.image_width(),
            regions.image_height()
        )));
    }
    let enhanced = enhance_edges(&img.edge, regions)?;
    let mut proposals = generate_proposals(&enhanced, regions, &cfg.proposal_params())?;
    if let Some(n) = cfg.proposals.max_scored {
        proposals.truncate(n);
    }
    Ok((enhanced, proposals))
}

/// Full ranked proposal list (no truncation), as used for recall.
pub fn rank_proposals(img: &LoadedImage, regions: &MLRegionSet, cfg: &PipelineConfig) -> Result<Vec<Proposal>> {
    let mut c = cfg.clone();
    c.proposals.max_scored = None;
    Ok(propose(img, regions, &c)?.1)
}

pub fn train(images: &[LoadedImage], regions: MLRegionSet, cfg: &PipelineConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate(regions.k())?;
    let ranges = vertical_ranges(&regions);
    let samples: Vec<_> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let (enhanced, mut proposals) = propose(img, &regions, cfg)?;
            let classes = img.masks.integrals();
            for p in &mut proposals {
                p.category = Some(label_proposal(&p.rect, &classes)?);
            }
            let ctx = FeatureContext::new(&enhanced, &img.rgb)?;
            let seed = derive_seed(cfg.seed, IMAGE_SEED_STREAM + i as u64);
            collect_image_samples(&ctx, &proposals, &img.gt, &ranges, &model_cfg, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<_> = samples.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::Config("no training image has ground-truth obstacles".into()));
    }
    train_model(&samples, regions, &model_cfg, cfg.seed)
}

/// Regressor outputs for one image, before gating and fusion.
#[derive(Clone, Debug)]
pub struct ImagePrediction {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub proposals: Vec<Proposal>,
    pub pairs: Vec<(f64, f64)>,
}

pub fn describe_all(ctx: &FeatureContext, proposals: &[Proposal]) -> Result<Vec<FeatureVector>> {
    proposals.par_iter().map(|p| ctx.describe(p)).collect()
}

pub fn predict_image(model: &TrainedModel, img: &LoadedImage, cfg: &PipelineConfig) -> Result<ImagePrediction> {
    let (enhanced, proposals) = propose(img, &model.regions, cfg)?;
    let ctx = FeatureContext::new(&enhanced, &img.rgb)?;
    let features = describe_all(&ctx, &proposals)?;
    let pairs = predict_pairs(model, &features)?;
    Ok(ImagePrediction { id: img.id.clone(), width: img.width(), height: img.height(), proposals, pairs })
}

/// Gates, fuses and accumulates one image's predictions.
pub fn finish_image(pred: &ImagePrediction, fusion: &FusionParams) -> Result<(Vec<ScoredProposal>, ProbabilityMap)> {
    let scored = fuse_scores(&pred.proposals, &pred.pairs, fusion)?;
    let boxes: Vec<(Rect, f64)> = scored.iter().map(|s| (s.proposal.rect, s.score)).collect();
    let map = build_probability_map(&boxes, pred.width, pred.height)?;
    Ok((scored, map))
}

pub fn ranked_images(images: &[LoadedImage], proposals: &[Vec<Proposal>]) -> Vec<RankedImage> {
    images
        .iter()
        .zip(proposals)
        .map(|(img, ps)| RankedImage { proposals: ps.iter().map(|p| p.rect).collect(), gt: img.gt.clone() })
        .collect()
}

/// One ranked proposal as written to `proposals.csv` and `scores.csv`.
/// The regressor columns are empty for unscored proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub image_id: String,
    pub rank: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub layer: usize,
    pub objectness: f64,
    #[serde(default)]
    pub f_or: Option<f64>,
    #[serde(default)]
    pub f_ob: Option<f64>,
    #[serde(default)]
    pub score: Option<f64>,
}

impl ProposalRow {
    pub fn from_proposal(image_id: &str, rank: usize, p: &Proposal) -> Self {
        Self {
            image_id: image_id.to_string(),
            rank,
            x: p.rect.x,
            y: p.rect.y,
            w: p.rect.w,
            h: p.rect.h,
            layer: p.layer,
            objectness: p.objectness,
            f_or: None,
            f_ob: None,
            score: None,
        }
    }

    pub fn from_scored(image_id: &str, rank: usize, s: &ScoredProposal) -> Self {
        Self {
            f_or: Some(s.f_or),
            f_ob: Some(s.f_ob),
            score: Some(s.score),
            ..Self::from_proposal(image_id, rank, &s.proposal)
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

pub fn write_proposal_rows(path: &Path, rows: &[ProposalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Boxes per image in rank order.
pub fn read_ranked_boxes(path: &Path) -> Result<BTreeMap<String, Vec<Rect>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut by_image: BTreeMap<String, Vec<(usize, Rect)>> = BTreeMap::new();
    for row in rdr.deserialize::<ProposalRow>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if row.w == 0 || row.h == 0 {
            return Err(Error::Format(format!("{}: empty box in image {}", path.display(), row.image_id)));
        }
        let rect = row.rect();
        by_image.entry(row.image_id).or_default().push((row.rank, rect));
    }
    Ok(by_image
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|&(rank, _)| rank);
            (id, v.into_iter().map(|(_, r)| r).collect())
        })
        .collect())
}
