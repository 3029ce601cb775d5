//! Obstacle-occupied probability map from fused proposal scores.

use std::path::Path;

use image::{DynamicImage, GrayImage};

use crate::edges::save_unit_png16;
use crate::error::{Error, Result};
use crate::geom::Rect;

/// Fixed-point resolution for accumulation: the largest score maps to
/// `2^40`. Integer difference arrays make the result independent of
/// summation order and keep exact zeros.
pub const FIXED_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!("{} values for a {width}x{height} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0.0; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 16-bit grayscale PNG, value `round(P * 65535)`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let v: Vec<f32> = self.values.iter().map(|&p| p as f32).collect();
        save_unit_png16(self.width, self.height, &v, path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let DynamicImage::ImageLuma16(buf) = img else {
            return Err(Error::Format(format!("{}: probability maps must be 16-bit grayscale", path.display())));
        };
        let (w, h) = buf.dimensions();
        let values = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Self::new(w, h, values)
    }
}

/// Number of proposals contributing to the map: the top half, at least one.
pub fn contributing_count(total: usize) -> usize {
    if total == 0 {
        0
    } else {
        (total / 2).max(1)
    }
}

/// Accumulates the scores of the top half of `scored` (by score) into each
/// covered pixel and normalizes by the maximum. Zero scores never contribute.
pub fn build_probability_map(scored: &[(Rect, f64)], width: u32, height: u32) -> Result<ProbabilityMap> {
    for (r, s) in scored {
        if !r.fits_in(width, height) {
            return Err(Error::InvalidInput(format!("box {r:?} outside the {width}x{height} map")));
        }
        if !(s.is_finite() && *s >= 0.0) {
            return Err(Error::Contract(format!("proposal score {s} is not a finite non-negative value")));
        }
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1));
    order.truncate(contributing_count(scored.len()));

    let (w, h) = (width as usize, height as usize);
    // (w+1)x(h+1) difference array
    let stride = w + 1;
    let mut diff = vec![0i64; stride * (h + 1)];
    let top = order.first().map_or(0.0, |&i| scored[i].1);
    if top <= 0.0 {
        return Ok(ProbabilityMap::zeros(width, height));
    }
    for &i in &order {
        let (r, s) = scored[i];
        let q = (s / top * FIXED_SCALE).round() as i64;
        if q == 0 || r.is_empty() {
            continue;
        }
        let (x0, y0, x1, y1) = (r.x as usize, r.y as usize, r.right() as usize, r.bottom() as usize);
        diff[y0 * stride + x0] += q;
        diff[y0 * stride + x1] -= q;
        diff[y1 * stride + x0] -= q;
        diff[y1 * stride + x1] += q;
    }
    let mut acc = vec![0i64; w * h];
    for y in 0..h {
        let mut row = 0i64;
        for x in 0..w {
            row += diff[y * stride + x];
            acc[y * w + x] = row + if y > 0 { acc[(y - 1) * w + x] } else { 0 };
        }
    }
    let max = acc.iter().copied().max().unwrap_or(0);
    if max <= 0 {
        return Ok(ProbabilityMap::zeros(width, height));
    }
    let values = acc.iter().map(|&a| a as f64 / max as f64).collect();
    Ok(ProbabilityMap { width, height, values })
}

/// Pixels with `P > t`.
pub fn threshold_mask(map: &ProbabilityMap, t: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {t}")));
    }
    Ok(map.values.iter().map(|&p| p > t).collect())
}

/// 8-bit mask PNG with obstacle pixels at 255.
pub fn mask_image(width: u32, height: u32, mask: &[bool]) -> Result<GrayImage> {
    let raw = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    GrayImage::from_raw(width, height, raw)
        .ok_or_else(|| Error::Contract(format!("{} mask pixels for a {width}x{height} image", mask.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_box_is_unit_inside() {
        let m = build_probability_map(&[(Rect::new(2, 3, 4, 2), 0.37)], 10, 8).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let inside = (2..6).contains(&x) && (3..5).contains(&y);
                assert_eq!(m.get(x, y), if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(threshold_mask(&m, 0.0).unwrap().iter().filter(|&&b| b).count(), 8);
        assert!(threshold_mask(&m, 1.0).unwrap().iter().all(|&b| !b));
        assert!(matches!(threshold_mask(&m, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn disjoint_boxes_scale_by_score() {
        // top half of four proposals: the two best
        let scored = [
            (Rect::new(0, 0, 2, 2), 0.8),
            (Rect::new(5, 5, 2, 2), 0.4),
            (Rect::new(0, 5, 2, 2), 0.1),
            (Rect::new(5, 0, 2, 2), 0.05),
        ];
        let m = build_probability_map(&scored, 8, 8).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(5, 5), 0.5);
        assert_eq!(m.get(0, 5), 0.0);
        assert_eq!(m.get(5, 0), 0.0);
    }

    #[test]
    fn zero_scores_give_empty_map() {
        let m = build_probability_map(&[(Rect::new(0, 0, 3, 3), 0.0), (Rect::new(1, 1, 3, 3), 0.0)], 5, 5).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        let m = build_probability_map(&[], 5, 5).unwrap();
        assert_eq!(m.max(), 0.0);
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let m = build_probability_map(&[(Rect::new(0, 0, 3, 3), 0.6), (Rect::new(1, 1, 3, 3), 0.3)], 6, 5).unwrap();
        m.save_png(&path).unwrap();
        let back = ProbabilityMap::load_png(&path).unwrap();
        for (a, b) in m.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn masks_nest(vals in proptest::collection::vec(0.0f64..=1.0, 36), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let m = ProbabilityMap::new(6, 6, vals).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = threshold_mask(&m, lo).unwrap();
            let b = threshold_mask(&m, hi).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| !*y || *x));
        }
    }
}
