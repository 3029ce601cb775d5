//! Pixel-level ROC and instance-level recall metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{iou, Rect};
use crate::masks::SceneMasks;
use crate::probmap::ProbabilityMap;
use crate::proposals::Category;

pub const ROC_THRESHOLDS: usize = 100;

/// IoU grid for average recall, in hundredths: 0.50, 0.55, …, 1.00.
pub const AR_IOU_PERCENT: [u32; 11] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95, 100];

/// Bin-centre thresholds `0.005, 0.015, …, 0.995`.
pub fn roc_thresholds() -> Vec<f64> {
    (0..ROC_THRESHOLDS).map(|i| (2 * i + 1) as f64 / (2 * ROC_THRESHOLDS) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub obstacle_pixels: u64,
    pub road_pixels: u64,
}

/// Per-class histograms of "how many thresholds this pixel exceeds".
fn tally(map: &ProbabilityMap, masks: &SceneMasks, thresholds: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut obstacle = vec![0u64; thresholds.len() + 1];
    let mut road = vec![0u64; thresholds.len() + 1];
    for (p, c) in map.values().iter().zip(masks.classes()) {
        let hist = match c {
            Category::Obstacle => &mut obstacle,
            Category::Road => &mut road,
            Category::Background => continue,
        };
        hist[thresholds.partition_point(|&t| t < *p)] += 1;
    }
    (obstacle, road)
}

/// Global pixel ROC: obstacle pixels count toward TPR, road pixels toward
/// FPR; background pixels are ignored.
pub fn pixel_roc(maps: &[ProbabilityMap], masks: &[SceneMasks]) -> Result<RocCurve> {
    if maps.len() != masks.len() {
        return Err(Error::Contract(format!("{} maps but {} mask sets", maps.len(), masks.len())));
    }
    for (i, (m, s)) in maps.iter().zip(masks).enumerate() {
        if (m.width(), m.height()) != (s.width(), s.height()) {
            return Err(Error::Contract(format!(
                "image {i}: map is {}x{} but masks are {}x{}",
                m.width(),
                m.height(),
                s.width(),
                s.height()
            )));
        }
    }
    let thresholds = roc_thresholds();
    let n = thresholds.len();
    let (obstacle, road) = maps.par_iter().zip(masks).map(|(m, s)| tally(m, s, &thresholds)).reduce(
        || (vec![0; n + 1], vec![0; n + 1]),
        |(mut a, mut b), (c, d)| {
            a.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
            b.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            (a, b)
        },
    );
    let gt_obstacle: u64 = obstacle.iter().sum();
    let gt_road: u64 = road.iter().sum();
    if gt_obstacle == 0 {
        return Err(Error::Undefined("no obstacle ground-truth pixels; TPR is undefined".into()));
    }
    if gt_road == 0 {
        return Err(Error::Undefined("no road ground-truth pixels; FPR is undefined".into()));
    }
    // a pixel in bin c exceeds thresholds 0..c
    let (mut tp, mut fp) = (gt_obstacle, gt_road);
    let mut points = Vec::with_capacity(n);
    for (i, &t) in thresholds.iter().enumerate() {
        tp -= obstacle[i];
        fp -= road[i];
        points.push(RocPoint { threshold: t, fpr: fp as f64 / gt_road as f64, tpr: tp as f64 / gt_obstacle as f64 });
    }
    Ok(RocCurve { points, obstacle_pixels: gt_obstacle, road_pixels: gt_road })
}

/// TPR at `fpr` by linear interpolation over the curve plus the (0,0) and
/// (1,1) anchors. On vertical runs the highest TPR at or below `fpr` is used.
pub fn tpr_at_fpr(curve: &RocCurve, fpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr) {
        return Err(Error::Config(format!("FPR must lie in [0, 1], got {fpr}")));
    }
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let split = pts.partition_point(|p| p.0 <= fpr);
    let lower = pts[split - 1];
    let Some(&upper) = pts.get(split) else {
        return Ok(lower.1);
    };
    Ok(lower.1 + (upper.1 - lower.1) * (fpr - lower.0) / (upper.0 - lower.0))
}

pub fn write_roc_csv<W: Write>(out: W, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &curve.points {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<roc csv>", e))
}

/// One image's ranked proposals and its ground-truth boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedImage {
    pub proposals: Vec<Rect>,
    pub gt: Vec<Rect>,
}

/// Ground-truth boxes matched by greedy one-to-one matching: each proposal
/// in rank order claims the unclaimed box it overlaps most (ties: lowest
/// index), provided the overlap reaches `threshold`.
fn matched(img: &RankedImage, threshold: f64, top_n: Option<usize>) -> usize {
    let mut taken = vec![false; img.gt.len()];
    let mut hits = 0;
    let n = top_n.unwrap_or(usize::MAX).min(img.proposals.len());
    for p in &img.proposals[..n] {
        if hits == img.gt.len() {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in img.gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(p, gt);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hits += 1;
        }
    }
    hits
}

fn total_gt(images: &[RankedImage]) -> Result<usize> {
    let n: usize = images.iter().map(|i| i.gt.len()).sum();
    if n == 0 {
        return Err(Error::Undefined("no ground-truth boxes; recall is undefined".into()));
    }
    Ok(n)
}

/// Fraction of ground-truth boxes matched by the top `top_n` proposals
/// (all proposals when `None`).
pub fn instance_recall(images: &[RankedImage], iou_threshold: f64, top_n: Option<usize>) -> Result<f64> {
    let total = total_gt(images)?;
    let hits: usize = images.par_iter().map(|i| matched(i, iou_threshold, top_n)).sum();
    Ok(hits as f64 / total as f64)
}

/// Mean recall over the IoU grid 0.50..=1.00 in steps of 0.05.
pub fn average_recall(images: &[RankedImage], top_n: Option<usize>) -> Result<f64> {
    let mut sum = 0.0;
    for pct in AR_IOU_PERCENT {
        sum += instance_recall(images, pct as f64 / 100.0, top_n)?;
    }
    Ok(sum / AR_IOU_PERCENT.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallPoint {
    pub n_or_iou: f64,
    pub recall: f64,
}

/// Recall at IoU `iou_threshold` for each proposal budget in `counts`.
pub fn recall_by_count(images: &[RankedImage], iou_threshold: f64, counts: &[usize]) -> Result<Vec<RecallPoint>> {
    counts
        .iter()
        .map(|&n| Ok(RecallPoint { n_or_iou: n as f64, recall: instance_recall(images, iou_threshold, Some(n))? }))
        .collect()
}

/// Recall at each IoU of the AR grid for a fixed budget.
pub fn recall_by_iou(images: &[RankedImage], top_n: Option<usize>) -> Result<Vec<RecallPoint>> {
    AR_IOU_PERCENT
        .iter()
        .map(|&p| {
            let t = p as f64 / 100.0;
            Ok(RecallPoint { n_or_iou: t, recall: instance_recall(images, t, top_n)? })
        })
        .collect()
}

pub fn write_recall_csv<W: Write>(out: W, points: &[RecallPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<recall csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene(classes: Vec<Category>, w: u32, h: u32) -> SceneMasks {
        SceneMasks::new(w, h, classes).unwrap()
    }

    fn stripes() -> SceneMasks {
        // top half obstacle, bottom half road, right column background
        let mut c = Vec::new();
        for y in 0..4 {
            for x in 0..5 {
                c.push(if x == 4 {
                    Category::Background
                } else if y < 2 {
                    Category::Obstacle
                } else {
                    Category::Road
                });
            }
        }
        scene(c, 5, 4)
    }

    #[test]
    fn thresholds_are_bin_centres() {
        let t = roc_thresholds();
        assert_eq!(t.len(), 100);
        assert_eq!(t[0], 0.005);
        assert_eq!(t[99], 0.995);
        assert_eq!(t[49], 0.495);
    }

    #[test]
    fn separable_map_is_perfect() {
        let s = stripes();
        let vals: Vec<f64> = s.classes().iter().map(|c| if *c == Category::Obstacle { 1.0 } else { 0.0 }).collect();
        let roc = pixel_roc(&[ProbabilityMap::new(5, 4, vals).unwrap()], &[s]).unwrap();
        assert!(roc.points.iter().all(|p| p.tpr == 1.0 && p.fpr == 0.0));
        assert_eq!(tpr_at_fpr(&roc, 0.02).unwrap(), 1.0);
    }

    #[test]
    fn uniform_half_map_steps() {
        let s = stripes();
        let roc = pixel_roc(&[ProbabilityMap::new(5, 4, vec![0.5; 20]).unwrap()], &[s]).unwrap();
        for p in &roc.points {
            let want = if p.threshold < 0.5 { 1.0 } else { 0.0 };
            assert_eq!((p.tpr, p.fpr), (want, want));
        }
    }

    #[test]
    fn rates_are_counts_over_gt() {
        // 100 obstacle pixels, 80 above 0.5; 50 road pixels, 5 above 0.5
        let mut c = vec![Category::Obstacle; 100];
        c.extend(vec![Category::Road; 50]);
        let mut v = vec![0.9; 80];
        v.extend(vec![0.1; 20]);
        v.extend(vec![0.7; 5]);
        v.extend(vec![0.0; 45]);
        let roc = pixel_roc(&[ProbabilityMap::new(150, 1, v).unwrap()], &[scene(c, 150, 1)]).unwrap();
        let p = &roc.points[60];
        assert_eq!((p.tpr, p.fpr), (0.8, 0.1));
        assert_eq!(roc.obstacle_pixels, 100);
    }

    #[test]
    fn undefined_without_class_pixels() {
        let s = scene(vec![Category::Road; 4], 2, 2);
        let r = pixel_roc(&[ProbabilityMap::zeros(2, 2)], &[s]);
        assert!(matches!(r, Err(Error::Undefined(m)) if m.contains("obstacle")));
        let s = scene(vec![Category::Obstacle; 4], 2, 2);
        let r = pixel_roc(&[ProbabilityMap::zeros(2, 2)], &[s]);
        assert!(matches!(r, Err(Error::Undefined(m)) if m.contains("road")));
    }

    #[test]
    fn interpolation_between_points() {
        let curve = RocCurve {
            points: vec![
                RocPoint { threshold: 0.25, fpr: 0.1, tpr: 0.6 },
                RocPoint { threshold: 0.75, fpr: 0.0, tpr: 0.2 },
            ],
            obstacle_pixels: 1,
            road_pixels: 1,
        };
        assert!((tpr_at_fpr(&curve, 0.05).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(tpr_at_fpr(&curve, 0.0).unwrap(), 0.2);
        assert!((tpr_at_fpr(&curve, 0.55).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(tpr_at_fpr(&curve, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn recall_examples() {
        let gt = vec![Rect::new(0, 0, 10, 10), Rect::new(20, 20, 5, 5)];
        let perfect = RankedImage { proposals: gt.clone(), gt: gt.clone() };
        assert_eq!(instance_recall(std::slice::from_ref(&perfect), 0.5, None).unwrap(), 1.0);
        assert_eq!(average_recall(&[perfect], Some(1000)).unwrap(), 1.0);
        let empty = RankedImage { proposals: vec![], gt: gt.clone() };
        assert_eq!(instance_recall(&[empty], 0.5, None).unwrap(), 0.0);

        // one box nearly covering two small, adjacent GT boxes
        let pair = vec![Rect::new(0, 0, 10, 10), Rect::new(10, 0, 1, 10)];
        let cover = RankedImage { proposals: vec![Rect::new(0, 0, 11, 10)], gt: pair };
        assert_eq!(instance_recall(&[cover], 0.05, None).unwrap(), 0.5);

        assert!(matches!(instance_recall(&[RankedImage::default()], 0.5, None), Err(Error::Undefined(_))));
    }

    #[test]
    fn ar_counts_grid_points() {
        // IoU between 0.75 and 0.80: matched at 0.50..=0.75 (6 of 11 grid points)
        let gt = Rect::new(0, 0, 100, 100);
        let p = Rect::new(0, 0, 100, 77);
        let o = iou(&p, &gt);
        assert!((0.75..0.8).contains(&o));
        let img = RankedImage { proposals: vec![p], gt: vec![gt] };
        assert!((average_recall(&[img], None).unwrap() - 6.0 / 11.0).abs() < 1e-15);
    }

    fn arb_rect() -> impl Strategy<Value = Rect> {
        (0u32..30, 0u32..30, 1u32..15, 1u32..15).prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
    }

    fn arb_image() -> impl Strategy<Value = RankedImage> {
        (proptest::collection::vec(arb_rect(), 0..25), proptest::collection::vec(arb_rect(), 1..5))
            .prop_map(|(proposals, gt)| RankedImage { proposals, gt })
    }

    proptest! {
        #[test]
        fn roc_is_monotone(vals in proptest::collection::vec(0.0f64..=1.0, 20)) {
            let roc = pixel_roc(&[ProbabilityMap::new(5, 4, vals).unwrap()], &[stripes()]).unwrap();
            for w in roc.points.windows(2) {
                prop_assert!(w[1].tpr <= w[0].tpr && w[1].fpr <= w[0].fpr);
            }
        }

        #[test]
        fn recall_grows_with_budget(imgs in proptest::collection::vec(arb_image(), 1..4)) {
            let mut last = 0.0;
            for n in [0usize, 1, 2, 5, 10, 30] {
                let r = instance_recall(&imgs, 0.5, Some(n)).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
            let ar_small = average_recall(&imgs, Some(3)).unwrap();
            prop_assert!(average_recall(&imgs, Some(30)).unwrap() >= ar_small);
        }

        #[test]
        fn loosest_setting_bounds_others(imgs in proptest::collection::vec(arb_image(), 1..4)) {
            let top = instance_recall(&imgs, 0.5, None).unwrap();
            for pct in AR_IOU_PERCENT {
                for n in [1usize, 3, 10] {
                    prop_assert!(instance_recall(&imgs, pct as f64 / 100.0, Some(n)).unwrap() <= top);
                }
            }
        }
    }
}
