//! Multistride sliding-window proposals.
//!
//! Windows are enumerated per ML region with a stride that shrinks in deeper
//! (farther) layers, scored by a border-penalized edge-mass objectness on the
//! enhanced edge map, and ranked.

use std::collections::HashSet;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edges::EnhancedEdgeMap;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::integral::IntegralImage;
use crate::masks::ClassIntegrals;
use crate::mlregions::MLRegionSet;

pub use crate::geom::iou;

/// Smallest stride in pixels.
pub const MIN_STRIDE: u32 = 2;
/// Multiplicative step between consecutive window aspect ratios.
pub const ASPECT_STEP: f64 = 1.5;
pub const MIN_ASPECT: f64 = 1.0 / 3.0;
pub const MAX_ASPECT: f64 = 3.0;
/// Weight on border-strip edge mass in the objectness score.
pub const BORDER_PENALTY: f64 = 2.0;
/// Exponent on the box perimeter in the objectness normalizer.
pub const SIZE_EXPONENT: f64 = 1.5;

/// Grid cell (px) for the NMS neighbour index.
const NMS_CELL: usize = 8;
/// Below this overlap the neighbour bound is too loose to help.
const NMS_GRID_MIN_OVERLAP: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Road,
    Obstacle,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub rect: Rect,
    pub objectness: f64,
    /// 1-based ML layer the window was sampled from.
    pub layer: usize,
    pub category: Option<Category>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    /// IoU between neighbouring windows; sets the base stride ratio.
    pub alpha: f64,
    /// Shrink the stride by `(K - k + 1) / K` in layer `k`.
    pub multistride: bool,
    /// Smallest window area in px².
    pub min_window_area: u64,
    /// Only sample layers `1..=layers` (all when `None`).
    pub layers: Option<usize>,
    /// Optional greedy NMS overlap.
    pub nms_overlap: Option<f64>,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self { alpha: 0.65, multistride: true, min_window_area: 100, layers: None, nms_overlap: None }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Translation stride `max(2, ⌊(1-α)/(1+α) · (K-k+1)/K · L⌋)` for layer `k` of `K`.
pub fn stride(alpha: f64, k_total: usize, k: usize, len: u32) -> Result<u32> {
    stride_with(alpha, k_total, k, len, true)
}

/// Like [`stride`]; `multistride = false` drops the per-layer factor.
pub fn stride_with(alpha: f64, k_total: usize, k: usize, len: u32, multistride: bool) -> Result<u32> {
    check_alpha(alpha)?;
    if k == 0 || k > k_total {
        return Err(Error::Config(format!("layer {k} outside 1..={k_total}")));
    }
    if len == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let layer_factor = if multistride { (k_total - k + 1) as f64 / k_total as f64 } else { 1.0 };
    let raw = (1.0 - alpha) / (1.0 + alpha) * layer_factor * len as f64;
    // nudge exact products that landed a hair under an integer
    Ok(((raw + 1e-9).floor() as u32).max(MIN_STRIDE))
}

/// Aspect ratios `1.5^j` inside `[1/3, 3]`, symmetric around 1.
pub fn aspect_ratios() -> Vec<f64> {
    let mut j_max = 0i32;
    while ASPECT_STEP.powi(j_max + 1) <= MAX_ASPECT + 1e-9 {
        j_max += 1;
    }
    (-j_max..=j_max).map(|j| ASPECT_STEP.powi(j)).filter(|r| *r >= MIN_ASPECT - 1e-9).collect()
}

/// Distinct `(w, h)` window shapes with area from `min_area` up to `max_area`
/// in steps of `1/α²`.
pub fn window_shapes(alpha: f64, min_area: u64, max_area: u64) -> Result<Vec<(u32, u32)>> {
    check_alpha(alpha)?;
    let step = 1.0 / (alpha * alpha);
    let aspects = aspect_ratios();
    let mut shapes = Vec::new();
    let mut area = min_area.max(1) as f64;
    while area <= max_area as f64 + 1e-9 {
        for &r in &aspects {
            let w = ((area * r).sqrt().round() as u32).max(1);
            let h = ((area / r).sqrt().round() as u32).max(1);
            if !shapes.contains(&(w, h)) {
                shapes.push((w, h));
            }
        }
        area *= step;
    }
    Ok(shapes)
}

/// All sliding windows inside `region` for layer `k` of `k_total`.
///
/// Windows that do not fit the region are dropped, never shrunk.
pub fn enumerate_windows(
    region: &Rect,
    k: usize,
    k_total: usize,
    alpha: f64,
    multistride: bool,
    min_area: u64,
) -> Result<Vec<Rect>> {
    check_alpha(alpha)?;
    let mut out = Vec::new();
    if region.area() < min_area {
        return Ok(out);
    }
    for (w, h) in window_shapes(alpha, min_area, region.area())? {
        if w > region.w || h > region.h {
            continue;
        }
        let sx = stride_with(alpha, k_total, k, w, multistride)?;
        let sy = stride_with(alpha, k_total, k, h, multistride)?;
        let mut y = region.y;
        while y + h <= region.bottom() {
            let mut x = region.x;
            while x + w <= region.right() {
                out.push(Rect::new(x, y, w, h));
                x += sx;
            }
            y += sy;
        }
    }
    Ok(out)
}

/// `max(0, S_in - γ·S_border) / (2(w+h))^κ` from an integral image of the
/// enhanced edge map, where the border strip is `max(1, round(0.1·min(w,h)))`
/// wide and `S_in` covers what is left inside it.
pub fn score_objectness(rect: &Rect, edges: &IntegralImage) -> f64 {
    let total = edges.sum(rect);
    let inner = rect.shrink(rect.border_width()).map_or(0.0, |r| edges.sum(&r));
    let border = total - inner;
    let numer = (inner - BORDER_PENALTY * border).max(0.0);
    numer / (2.0 * (rect.w + rect.h) as f64).powf(SIZE_EXPONENT)
}

/// Integral image over the clamped enhanced edge values.
pub fn edge_integral(edge: &EnhancedEdgeMap) -> IntegralImage {
    IntegralImage::new(edge.width(), edge.height(), edge.values())
}

fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.objectness
        .total_cmp(&a.objectness)
        .then(a.rect.x.cmp(&b.rect.x))
        .then(a.rect.y.cmp(&b.rect.y))
        .then(a.rect.w.cmp(&b.rect.w))
        .then(a.rect.h.cmp(&b.rect.h))
}

/// Sorts by objectness descending, ties by `(x, y, w, h)`.
pub fn sort_proposals(proposals: &mut [Proposal]) {
    proposals.sort_by(rank_order);
}

/// The initial proposal set over all (or the first `layers`) ML regions.
pub fn generate_proposals(
    edge: &EnhancedEdgeMap,
    regions: &MLRegionSet,
    params: &ProposalParams,
) -> Result<Vec<Proposal>> {
    let integral = edge_integral(edge);
    generate_proposals_with(&integral, regions, params)
}

/// [`generate_proposals`] on a prebuilt integral image.
pub fn generate_proposals_with(
    integral: &IntegralImage,
    regions: &MLRegionSet,
    params: &ProposalParams,
) -> Result<Vec<Proposal>> {
    let k_total = regions.k();
    let used = params.layers.unwrap_or(k_total);
    if used == 0 || used > k_total {
        return Err(Error::Config(format!("layers must be in 1..={k_total}, got {used}")));
    }
    for r in regions.regions() {
        if !r.fits_in(integral.width(), integral.height()) {
            return Err(Error::InvalidInput(format!("region {r:?} exceeds the edge map")));
        }
    }
    let mut seen = HashSet::new();
    let mut windows = Vec::new();
    for k in 1..=used {
        let region = regions.layer(k);
        for rect in enumerate_windows(region, k, k_total, params.alpha, params.multistride, params.min_window_area)? {
            if seen.insert(rect) {
                windows.push((rect, k));
            }
        }
    }
    let mut proposals: Vec<Proposal> = windows
        .par_iter()
        .map(|&(rect, layer)| Proposal { rect, objectness: score_objectness(&rect, integral), layer, category: None })
        .collect();
    sort_proposals(&mut proposals);
    if let Some(overlap) = params.nms_overlap {
        proposals = non_max_suppression(proposals, overlap);
    }
    Ok(proposals)
}

/// Greedy NMS over an already ranked list: a box is dropped when its IoU
/// with an already kept box exceeds `overlap`.
pub fn non_max_suppression(ranked: Vec<Proposal>, overlap: f64) -> Vec<Proposal> {
    if overlap < NMS_GRID_MIN_OVERLAP {
        let mut kept: Vec<Proposal> = Vec::new();
        for p in ranked {
            if kept.iter().all(|q| iou(&p.rect, &q.rect) <= overlap) {
                kept.push(p);
            }
        }
        return kept;
    }
    // IoU > t forces |dx| < max(w_p, w_q)(1 - t) and w_q < w_p / t, so only
    // kept boxes whose corner lies within w_p (1 - t) / t need checking.
    let reach = (1.0 - overlap) / overlap;
    let extent = |rs: &[Proposal], f: fn(&Rect) -> u32| rs.iter().map(|p| f(&p.rect)).max().unwrap_or(0) as usize + 1;
    let (gw, gh) = (extent(&ranked, |r| r.x).div_ceil(NMS_CELL), extent(&ranked, |r| r.y).div_ceil(NMS_CELL));
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    let mut kept: Vec<Proposal> = Vec::new();
    for p in ranked {
        let r = p.rect;
        let rx = (r.w as f64 * reach).ceil() as usize;
        let ry = (r.h as f64 * reach).ceil() as usize;
        let (x, y) = (r.x as usize, r.y as usize);
        let cx0 = x.saturating_sub(rx) / NMS_CELL;
        let cx1 = ((x + rx) / NMS_CELL).min(gw - 1);
        let cy0 = y.saturating_sub(ry) / NMS_CELL;
        let cy1 = ((y + ry) / NMS_CELL).min(gh - 1);
        let clash = (cy0..=cy1)
            .any(|cy| (cx0..=cx1).any(|cx| grid[cy * gw + cx].iter().any(|&q| iou(&r, &kept[q].rect) > overlap)));
        if !clash {
            grid[(y / NMS_CELL) * gw + x / NMS_CELL].push(kept.len());
            kept.push(p);
        }
    }
    kept
}

/// Majority class of the box's pixels; without a strict majority the
/// plurality wins, ties resolved Obstacle > Road > Background.
pub fn label_proposal(rect: &Rect, classes: &ClassIntegrals) -> Result<Category> {
    if !rect.fits_in(classes.width(), classes.height()) {
        return Err(Error::InvalidInput(format!("box {rect:?} falls outside the masks")));
    }
    let area = rect.area() as f64;
    let obstacle = classes.obstacle_count(rect);
    let road = classes.road_count(rect);
    let background = area - obstacle - road;
    let ranked = [(obstacle, Category::Obstacle), (road, Category::Road), (background, Category::Background)];
    if let Some((_, c)) = ranked.iter().find(|(n, _)| 2.0 * n > area) {
        return Ok(*c);
    }
    let mut best = ranked[0];
    for cand in &ranked[1..] {
        if cand.0 > best.0 {
            best = *cand;
        }
    }
    Ok(best.1)
}

/// One row of a proposal dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub layer: usize,
    pub objectness: f64,
}

impl ProposalRecord {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

/// Writes `image_id,x,y,w,h,layer,objectness` rows in the given (ranked) order.
pub fn write_proposals_csv<W: Write>(out: W, image_id: &str, proposals: &[Proposal], header: bool) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for p in proposals {
        wtr.serialize(ProposalRecord {
            image_id: image_id.to_string(),
            x: p.rect.x,
            y: p.rect.y,
            w: p.rect.w,
            h: p.rect.h,
            layer: p.layer,
            objectness: p.objectness,
        })
        .map_err(|e| Error::Format(format!("proposal csv: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("proposal csv: {e}")))?;
    Ok(())
}

pub fn read_proposals_csv<R: Read>(input: R) -> Result<Vec<ProposalRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("proposal csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edges::{enhance_edges, EdgeMap};
    use crate::masks::SceneMasks;
    use proptest::prelude::*;

    #[test]
    fn stride_examples() {
        assert_eq!(stride(0.65, 4, 1, 100).unwrap(), 21);
        assert_eq!(stride(0.65, 4, 4, 100).unwrap(), 5);
        assert_eq!(stride(0.65, 4, 4, 10).unwrap(), 2);
        assert!(matches!(stride(1.0, 4, 1, 100), Err(Error::Config(_))));
        assert!(matches!(stride(0.0, 4, 1, 100), Err(Error::Config(_))));
        assert!(stride(0.65, 4, 5, 100).is_err());
        assert_eq!(stride_with(0.65, 4, 4, 100, false).unwrap(), 21);
    }

    #[test]
    fn aspect_grid() {
        let r = aspect_ratios();
        assert_eq!(r.len(), 5);
        assert!(r.contains(&1.0));
        assert!(r.iter().all(|&a| (MIN_ASPECT..=MAX_ASPECT).contains(&a)));
    }

    #[test]
    fn exact_fit_region_has_one_window() {
        let w = enumerate_windows(&Rect::new(3, 4, 10, 10), 1, 1, 0.65, true, 100).unwrap();
        assert_eq!(w, vec![Rect::new(3, 4, 10, 10)]);
        assert!(enumerate_windows(&Rect::new(0, 0, 9, 9), 1, 1, 0.65, true, 100).unwrap().is_empty());
    }

    #[test]
    fn larger_alpha_never_reduces_window_count() {
        let region = Rect::new(0, 0, 64, 64);
        let mut last = 0;
        for alpha in [0.3, 0.5, 0.65, 0.8, 0.9] {
            let n = enumerate_windows(&region, 1, 4, alpha, true, 100).unwrap().len();
            assert!(n >= last, "alpha {alpha}: {n} < {last}");
            last = n;
        }
        for len in [10, 50, 100, 300] {
            assert!(stride(0.65, 4, 4, len).unwrap() <= stride(0.65, 4, 1, len).unwrap());
        }
    }

    #[test]
    fn objectness_examples() {
        let zero = IntegralImage::new(40, 40, &vec![0.0f32; 1600]);
        assert_eq!(score_objectness(&Rect::new(3, 3, 20, 10), &zero), 0.0);

        // blob of mass 3 strictly inside the 1-px border strip of a 20x10 box at (5,5)
        let mut vals = vec![0.0f32; 1600];
        vals[10 * 40 + 12] = 1.0;
        vals[9 * 40 + 14] = 0.5;
        vals[8 * 40 + 20] = 1.5;
        let ii = IntegralImage::new(40, 40, &vals);
        let s = score_objectness(&Rect::new(5, 5, 20, 10), &ii);
        assert!((s - 3.0 / 60f64.powf(1.5)).abs() < 1e-15);

        // translation invariance
        let mut shifted = vec![0.0f32; 1600];
        for y in 0..35 {
            for x in 0..33 {
                shifted[(y + 5) * 40 + x + 7] = vals[y * 40 + x];
            }
        }
        let ii2 = IntegralImage::new(40, 40, &shifted);
        assert_eq!(s, score_objectness(&Rect::new(12, 10, 20, 10), &ii2));
    }

    fn toy_edge(k: usize) -> (EnhancedEdgeMap, MLRegionSet) {
        let regions = [
            Rect::new(0, 20, 128, 100),
            Rect::new(16, 30, 96, 60),
            Rect::new(32, 40, 64, 36),
            Rect::new(48, 44, 32, 24),
        ];
        let set = MLRegionSet::new(regions[..k].to_vec(), 128, 128).unwrap();
        let mut vals = vec![0.0f32; 128 * 128];
        for (i, v) in vals.iter_mut().enumerate() {
            let (x, y) = (i % 128, i / 128);
            if (x == 60 || x == 70) && (50..58).contains(&y) || (y == 50 || y == 57) && (60..=70).contains(&x) {
                *v = 0.8;
            }
            if (x * 7 + y * 13) % 29 == 0 {
                *v = 0.2;
            }
        }
        let e = enhance_edges(&EdgeMap::new(128, 128, vals).unwrap(), &set).unwrap();
        (e, set)
    }

    #[test]
    fn single_layer_ignores_multistride() {
        let (e, set) = toy_edge(1);
        let on = generate_proposals(&e, &set, &ProposalParams::default()).unwrap();
        let off = generate_proposals(&e, &set, &ProposalParams { multistride: false, ..Default::default() }).unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn multistride_adds_proposals_and_boxes_stay_in_regions() {
        let (e, set) = toy_edge(4);
        let on = generate_proposals(&e, &set, &ProposalParams::default()).unwrap();
        let off = generate_proposals(&e, &set, &ProposalParams { multistride: false, ..Default::default() }).unwrap();
        assert!(on.len() >= off.len(), "{} < {}", on.len(), off.len());
        let mut seen = HashSet::new();
        for p in &on {
            assert!(set.layer(p.layer).contains(&p.rect));
            assert!(seen.insert(p.rect));
            assert!(p.objectness >= 0.0);
        }
        assert!(on.windows(2).all(|w| rank_order(&w[0], &w[1]) != std::cmp::Ordering::Greater));
    }

    #[test]
    fn duplicates_keep_lowest_layer() {
        // R_2 shares its origin with R_1 and (at K=2, k=1 vs k=2) strides differ, but a
        // 10x10 window at the shared origin is produced by both layers.
        let set = MLRegionSet::new(vec![Rect::new(0, 0, 40, 40), Rect::new(0, 0, 20, 20)], 40, 40).unwrap();
        let e = enhance_edges(&EdgeMap::new(40, 40, vec![0.1; 1600]).unwrap(), &set).unwrap();
        let props = generate_proposals(&e, &set, &ProposalParams::default()).unwrap();
        let origin: Vec<_> = props.iter().filter(|p| p.rect == Rect::new(0, 0, 10, 10)).collect();
        assert_eq!(origin.len(), 1);
        assert_eq!(origin[0].layer, 1);
    }

    #[test]
    fn objectness_scales_linearly() {
        let (e, set) = toy_edge(2);
        let ii = edge_integral(&e);
        let scaled: Vec<f64> = e.values().iter().map(|&v| v as f64 * 0.5).collect();
        let ii2 = IntegralImage::new(e.width(), e.height(), &scaled);
        for r in enumerate_windows(set.layer(2), 2, 2, 0.65, true, 100).unwrap().iter().step_by(37) {
            let a = score_objectness(r, &ii);
            let b = score_objectness(r, &ii2);
            assert!((b - 0.5 * a).abs() <= 1e-12 * a.max(1.0));
        }
    }

    fn brute_nms(ranked: &[Proposal], overlap: f64) -> Vec<Rect> {
        let mut kept: Vec<Rect> = Vec::new();
        for p in ranked {
            if kept.iter().all(|q| iou(&p.rect, q) <= overlap) {
                kept.push(p.rect);
            }
        }
        kept
    }

    proptest! {
        #[test]
        fn grid_nms_matches_brute_force(
            boxes in proptest::collection::vec((0u32..60, 0u32..40, 1u32..30, 1u32..30), 1..120),
            overlap in 0.0f64..1.0,
        ) {
            let ranked: Vec<Proposal> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| Proposal { rect: Rect::new(x, y, w, h), objectness: -(i as f64), layer: 1, category: None })
                .collect();
            let fast: Vec<Rect> = non_max_suppression(ranked.clone(), overlap).iter().map(|p| p.rect).collect();
            prop_assert_eq!(fast, brute_nms(&ranked, overlap));
        }
    }

    #[test]
    fn nms_removes_overlaps() {
        let mk = |x, s| Proposal { rect: Rect::new(x, 0, 10, 10), objectness: s, layer: 1, category: None };
        let kept = non_max_suppression(vec![mk(0, 0.9), mk(1, 0.8), mk(30, 0.7)], 0.5);
        assert_eq!(kept.iter().map(|p| p.rect.x).collect::<Vec<_>>(), vec![0, 30]);
    }

    #[test]
    fn labeling_rules() {
        // 10x10 box: 60 road, 10 obstacle, 30 background
        let mut classes = vec![Category::Background; 100];
        for (i, c) in classes.iter_mut().enumerate() {
            if i < 60 {
                *c = Category::Road;
            } else if i < 70 {
                *c = Category::Obstacle;
            }
        }
        let m = SceneMasks::new(10, 10, classes).unwrap();
        let ci = m.integrals();
        let full = Rect::new(0, 0, 10, 10);
        assert_eq!(label_proposal(&full, &ci).unwrap(), Category::Road);

        let mut c2 = vec![Category::Road; 100];
        c2[..55].iter_mut().for_each(|c| *c = Category::Obstacle);
        let m2 = SceneMasks::new(10, 10, c2).unwrap();
        assert_eq!(label_proposal(&full, &m2.integrals()).unwrap(), Category::Obstacle);

        let mut c3 = vec![Category::Road; 100];
        c3[50..].iter_mut().for_each(|c| *c = Category::Background);
        let m3 = SceneMasks::new(10, 10, c3).unwrap();
        assert_eq!(label_proposal(&full, &m3.integrals()).unwrap(), Category::Road);

        assert!(label_proposal(&Rect::new(5, 5, 10, 10), &ci).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let props = vec![
            Proposal { rect: Rect::new(1, 2, 3, 4), objectness: 0.1 + 0.2, layer: 2, category: None },
            Proposal { rect: Rect::new(5, 6, 7, 8), objectness: 1e-17, layer: 1, category: None },
        ];
        let mut buf = Vec::new();
        write_proposals_csv(&mut buf, "img", &props, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,x,y,w,h,layer,objectness\n"));
        let back = read_proposals_csv(&buf[..]).unwrap();
        assert_eq!(back[0].objectness, 0.1 + 0.2);
        assert_eq!(back[1].rect(), Rect::new(5, 6, 7, 8));
    }
}
