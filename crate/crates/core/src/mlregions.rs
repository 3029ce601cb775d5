//! Multilayer (ML) regions: the scene prior learned from where training
//! obstacles sit in the image.
//!
//! Obstacles are described by a 2-D pseudodistance (gap to the image bottom,
//! pixel area), clustered with k-means, and the clusters ordered near to far.
//! Region `R_j` is then the tight box around every obstacle in clusters
//! `j..K`, which nests the regions by construction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;

pub const REGIONS_FORMAT_VERSION: u32 = 1;

const KMEANS_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleAnnotation {
    pub image_id: String,
    pub rect: Rect,
    pub image_width: u32,
    pub image_height: u32,
}

impl ObstacleAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.rect.is_empty() {
            return Err(Error::InvalidInput(format!("obstacle in {} has an empty box {:?}", self.image_id, self.rect)));
        }
        if !self.rect.fits_in(self.image_width, self.image_height) {
            return Err(Error::InvalidInput(format!(
                "obstacle box {:?} in {} exceeds the {}x{} image",
                self.rect, self.image_id, self.image_width, self.image_height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoDistance {
    /// Rows between the obstacle bottom and the image bottom.
    pub bottom_gap: u32,
    /// Pixel area of the obstacle box.
    pub area: u64,
}

pub fn compute_pseudodistance(a: &ObstacleAnnotation) -> Result<PseudoDistance> {
    a.validate()?;
    Ok(PseudoDistance { bottom_gap: a.image_height - a.rect.bottom(), area: a.rect.area() })
}

/// Cluster labels ordered near (`0`) to far (`k - 1`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub k: usize,
    pub labels: Vec<usize>,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == cluster).map(|(i, _)| i)
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Zero-mean, unit-variance scaling per feature; constant features map to 0.
fn standardize(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    let mut sd = [0.0; 2];
    for d in 0..2 {
        mean[d] = points.iter().map(|p| p[d]).sum::<f64>() / n;
        sd[d] = (points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt();
        if sd[d] == 0.0 {
            sd[d] = 1.0;
        }
    }
    points.iter().map(|p| [(p[0] - mean[0]) / sd[0], (p[1] - mean[1]) / sd[1]]).collect()
}

/// k-means++ seeding: first center uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen center.
fn seed_centers(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(*p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                // rounding walked past the last positive weight
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a center: take an unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            if unused.is_empty() {
                rng.gen_range(0..n)
            } else {
                unused[rng.gen_range(0..unused.len())]
            }
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(*p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster. Ties pick the highest point index.
fn repair_empty(points: &[[f64; 2]], centers: &[[f64; 2]], labels: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = sq_dist(*p, centers[largest]);
                if d >= best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
        }
        labels[best.unwrap()] = empty;
    }
}

/// Groups obstacles into `k` pseudodistance clusters, ordered so that mean
/// bottom gap ascends (nearest first); ties go to the larger mean area first.
pub fn cluster_obstacles(annotations: &[ObstacleAnnotation], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::Config("number of layers must be at least 1".into()));
    }
    if annotations.len() < k {
        return Err(Error::Config(format!("{} obstacles cannot form {} clusters", annotations.len(), k)));
    }
    let pds = annotations.iter().map(compute_pseudodistance).collect::<Result<Vec<_>>>()?;
    let raw: Vec<[f64; 2]> = pds.iter().map(|p| [p.bottom_gap as f64, p.area as f64]).collect();
    let points = standardize(&raw);
    let n = points.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(&points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(*p, *center);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect();
        repair_empty(&points, &centers, &mut next, k);
        if next == labels {
            break;
        }
        labels = next;
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
    }

    // order clusters near to far on raw pseudodistance
    let mut stats: Vec<(usize, f64, f64)> = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let m = idx.len().max(1) as f64;
            let gap = idx.iter().map(|&i| raw[i][0]).sum::<f64>() / m;
            let area = idx.iter().map(|&i| raw[i][1]).sum::<f64>() / m;
            (c, gap, area)
        })
        .collect();
    stats.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    let mut rank = vec![0; k];
    for (r, (c, _, _)) in stats.iter().enumerate() {
        rank[*c] = r;
    }
    Ok(Clustering { k, labels: labels.into_iter().map(|l| rank[l]).collect() })
}

/// `K` nested regions `R_1 ⊇ … ⊇ R_K` (stored 0-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MLRegionSet {
    regions: Vec<Rect>,
    image_width: u32,
    image_height: u32,
}

impl MLRegionSet {
    /// Validates nesting and image containment.
    pub fn new(regions: Vec<Rect>, image_width: u32, image_height: u32) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Config("region set needs at least one region".into()));
        }
        for (k, r) in regions.iter().enumerate() {
            if r.is_empty() || !r.fits_in(image_width, image_height) {
                return Err(Error::InvalidInput(format!(
                    "region {} {:?} is empty or outside the {}x{} image",
                    k + 1,
                    r,
                    image_width,
                    image_height
                )));
            }
            if k > 0 && !regions[k - 1].contains(r) {
                return Err(Error::InvalidInput(format!(
                    "region {} {:?} is not nested in region {} {:?}",
                    k + 1,
                    r,
                    k,
                    regions[k - 1]
                )));
            }
        }
        Ok(Self { regions, image_width, image_height })
    }

    pub fn k(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[Rect] {
        &self.regions
    }

    /// Region for 1-based layer `layer`.
    pub fn layer(&self, layer: usize) -> &Rect {
        &self.regions[layer - 1]
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    /// Number of regions containing pixel `(x, y)`.
    pub fn multiplicity(&self, x: u32, y: u32) -> usize {
        self.regions.iter().take_while(|r| r.contains_point(x, y)).count()
    }

    /// Keeps only the first `layers` regions (the `@k` variants).
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.k() {
            return Err(Error::Config(format!("layers must be in 1..={}, got {}", self.k(), layers)));
        }
        Ok(Self {
            regions: self.regions[..layers].to_vec(),
            image_width: self.image_width,
            image_height: self.image_height,
        })
    }

    fn to_doc(&self) -> RegionsDoc {
        RegionsDoc {
            version: REGIONS_FORMAT_VERSION,
            k: self.k(),
            image_width: self.image_width,
            image_height: self.image_height,
            regions: self.regions.clone(),
            vertical_boundaries: vertical_ranges(self).boundaries,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("region set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegionsDoc = serde_json::from_str(text).map_err(|e| Error::Format(format!("region set: {e}")))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: RegionsDoc) -> Result<Self> {
        if doc.version != REGIONS_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "region set version {} (expected {})",
                doc.version, REGIONS_FORMAT_VERSION
            )));
        }
        if doc.k != doc.regions.len() {
            return Err(Error::Format(format!("K = {} but {} regions listed", doc.k, doc.regions.len())));
        }
        let set = Self::new(doc.regions, doc.image_width, doc.image_height)?;
        if vertical_ranges(&set).boundaries != doc.vertical_boundaries {
            return Err(Error::Format("vertical_boundaries disagree with regions".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Serialize for MLRegionSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MLRegionSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Self::from_doc(RegionsDoc::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionsDoc {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    image_width: u32,
    image_height: u32,
    regions: Vec<Rect>,
    vertical_boundaries: Vec<u32>,
}

/// Tight boxes around the obstacles of clusters `j..K` for each `j`.
pub fn build_regions(annotations: &[ObstacleAnnotation], clusters: &Clustering) -> Result<MLRegionSet> {
    if annotations.len() != clusters.labels.len() {
        return Err(Error::Contract("cluster labels do not match annotations".into()));
    }
    let Some(first) = annotations.first() else {
        return Err(Error::Config("no annotations to build regions from".into()));
    };
    let (w, h) = (first.image_width, first.image_height);
    if annotations.iter().any(|a| a.image_width != w || a.image_height != h) {
        return Err(Error::InvalidInput("annotations span images of different sizes".into()));
    }
    let mut regions = Vec::with_capacity(clusters.k);
    for j in 0..clusters.k {
        let bounds = annotations
            .iter()
            .zip(&clusters.labels)
            .filter(|(_, &l)| l >= j)
            .map(|(a, _)| a.rect)
            .reduce(|acc, r| acc.union_bounds(&r));
        match bounds {
            Some(b) => regions.push(b),
            None => return Err(Error::Config(format!("no obstacles fall in layers {}..{}", j + 1, clusters.k))),
        }
    }
    MLRegionSet::new(regions, w, h)
}

/// Fits regions from training annotations: cluster, then build.
pub fn fit_regions(annotations: &[ObstacleAnnotation], k: usize, seed: u64) -> Result<MLRegionSet> {
    let clusters = cluster_obstacles(annotations, k, seed)?;
    build_regions(annotations, &clusters)
}

/// Row boundaries `y_1 ≥ … ≥ y_{K+1}`: bottoms of `R_1..R_K`, then the top of `R_K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerticalRanges {
    pub boundaries: Vec<u32>,
}

impl VerticalRanges {
    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// 0-based range holding a proposal whose bottom row is `bottom`.
    ///
    /// Range `k` covers `y_{k+1} < bottom ≤ y_k`; bottoms below `y_1` fall in
    /// the first range and bottoms at or above `y_{K+1}` in the last.
    pub fn range_of(&self, bottom: u32) -> usize {
        let k = self.k();
        for i in (0..k).rev() {
            // walk far to near: the first range whose lower boundary reaches `bottom`
            if bottom <= self.boundaries[i] {
                return i;
            }
        }
        0
    }
}

pub fn vertical_ranges(regions: &MLRegionSet) -> VerticalRanges {
    let mut boundaries: Vec<u32> = regions.regions().iter().map(|r| r.bottom()).collect();
    boundaries.push(regions.regions().last().unwrap().y);
    VerticalRanges { boundaries }
}
