//! The 20-dimensional proposal descriptor.
//!
//! Layout (fixed):
//!
//! | idx | feature |
//! |-----|---------|
//! | 0–6 | max edge, mode edge (bin center), mode proportion, mean edge, inner-ring mean, edge density, inner-ring edge density |
//! | 7–12 | normalized area, aspect ratio, center x, center y, width, height |
//! | 13 | objectness |
//! | 14–19 | variance H/S/V, contrast H/S/V |

use std::io::Write;

use image::RgbImage;

use crate::edges::EnhancedEdgeMap;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::integral::HistogramIntegral;
pub use crate::integral::IntegralImage;
use crate::proposals::Proposal;

pub const FEATURE_DIM: usize = 20;
pub const MODE_BINS: usize = 256;
pub const COLOR_BINS: usize = 16;
pub const SURROUND_FACTOR: f64 = 2.0;
const CANCELLATION_EPS: f64 = 1e-12;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "edge_max",
    "edge_mode",
    "edge_mode_fraction",
    "edge_mean",
    "edge_mean_inner",
    "edge_density",
    "edge_density_inner",
    "area",
    "aspect",
    "center_x",
    "center_y",
    "width",
    "height",
    "objectness",
    "var_h",
    "var_s",
    "var_v",
    "contrast_h",
    "contrast_s",
    "contrast_v",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// HSV planes in `[0, 1]` (hexcone model, hue divided by 360°).
#[derive(Clone, Debug)]
pub struct HsvImage {
    pub width: u32,
    pub height: u32,
    pub channels: [Vec<f32>; 3],
}

pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> [f32; 3] {
    let (r, g, b) = (r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [(hue / 6.0).min(1.0), s, max]
}

impl HsvImage {
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (width, height) = image.dimensions();
        let mut channels: [Vec<f32>; 3] = Default::default();
        for p in image.pixels() {
            let hsv = rgb_to_hsv(p[0], p[1], p[2]);
            for c in 0..3 {
                channels[c].push(hsv[c]);
            }
        }
        Self { width, height, channels }
    }
}

fn color_bin(v: f32) -> usize {
    ((v * COLOR_BINS as f32) as usize).min(COLOR_BINS - 1)
}

/// Per-image tables shared by every proposal's color features.
#[derive(Clone, Debug)]
pub struct ColorTables {
    width: u32,
    height: u32,
    sums: [IntegralImage; 3],
    squares: [IntegralImage; 3],
    hists: [HistogramIntegral; 3],
}

impl ColorTables {
    pub fn new(hsv: &HsvImage) -> Self {
        let (w, h) = (hsv.width, hsv.height);
        let at = |c: usize| move |x: u32, y: u32| hsv.channels[c][(y * w + x) as usize];
        let sums = std::array::from_fn(|c| IntegralImage::from_fn(w, h, |x, y| at(c)(x, y) as f64));
        let squares = std::array::from_fn(|c| {
            IntegralImage::from_fn(w, h, |x, y| {
                let v = at(c)(x, y) as f64;
                v * v
            })
        });
        let hists =
            std::array::from_fn(|c| HistogramIntegral::from_fn(w, h, COLOR_BINS, |x, y| color_bin(at(c)(x, y))));
        Self { width: w, height: h, sums, squares, hists }
    }
}

/// Everything needed to describe proposals of one image.
pub struct FeatureContext<'a> {
    edge: &'a EnhancedEdgeMap,
    edge_integral: IntegralImage,
    color: ColorTables,
}

impl<'a> FeatureContext<'a> {
    pub fn new(edge: &'a EnhancedEdgeMap, image: &RgbImage) -> Result<Self> {
        if image.dimensions() != (edge.width(), edge.height()) {
            return Err(Error::Contract(format!(
                "image is {:?} but edge map is {}x{}",
                image.dimensions(),
                edge.width(),
                edge.height()
            )));
        }
        Ok(Self {
            edge,
            edge_integral: IntegralImage::new(edge.width(), edge.height(), edge.values()),
            color: ColorTables::new(&HsvImage::from_rgb(image)),
        })
    }

    pub fn edge_integral(&self) -> &IntegralImage {
        &self.edge_integral
    }

    pub fn describe(&self, proposal: &Proposal) -> Result<FeatureVector> {
        build_feature_vector(proposal, self.edge, &self.edge_integral, &self.color)
    }
}

/// Mode bins split `(0, 1]` uniformly; zero means "no response" and is not binned.
fn mode_bin(v: f32) -> Option<usize> {
    (v > 0.0).then(|| ((v * MODE_BINS as f32).ceil() as usize).clamp(1, MODE_BINS) - 1)
}

/// Edge mass in the border strip divided by the strip area.
fn border_density(r: &Rect, integral: &IntegralImage) -> f64 {
    let total = integral.sum(r);
    let inner = r.shrink(r.border_width());
    let inner_mass = inner.map_or(0.0, |i| integral.sum(&i));
    let strip_area = r.area() - inner.map_or(0, |i| i.area());
    (total - inner_mass).max(0.0) / strip_area as f64
}

fn check_inside(rect: &Rect, width: u32, height: u32) -> Result<()> {
    if rect.is_empty() || !rect.fits_in(width, height) {
        return Err(Error::InvalidInput(format!("box {rect:?} outside the {width}x{height} image")));
    }
    Ok(())
}

pub fn edge_structure_features(rect: &Rect, edge: &EnhancedEdgeMap, integral: &IntegralImage) -> Result<[f64; 7]> {
    check_inside(rect, edge.width(), edge.height())?;
    let mut hist = [0u32; MODE_BINS];
    let mut max = 0f32;
    for y in rect.y..rect.bottom() {
        for x in rect.x..rect.right() {
            let v = edge.get(x, y);
            max = max.max(v);
            if let Some(b) = mode_bin(v) {
                hist[b] += 1;
            }
        }
    }
    let area = rect.area() as f64;
    let (mode, fraction) =
        match hist.iter().enumerate().filter(|(_, &c)| c > 0).max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
            Some((b, &c)) => ((b as f64 + 0.5) / MODE_BINS as f64, c as f64 / area),
            None => (0.0, 0.0),
        };
    let inner = rect.inner_ring();
    Ok([
        max as f64,
        mode,
        fraction,
        integral.sum(rect) / area,
        integral.sum(&inner) / inner.area() as f64,
        border_density(rect, integral),
        border_density(&inner, integral),
    ])
}

pub fn geometry_features(rect: &Rect, width: u32, height: u32) -> Result<[f64; 6]> {
    check_inside(rect, width, height)?;
    let (wf, hf) = (width as f64, height as f64);
    Ok([
        rect.area() as f64 / (wf * hf),
        rect.w as f64 / rect.h as f64,
        (rect.x as f64 + rect.w as f64 / 2.0) / wf,
        (rect.y as f64 + rect.h as f64 / 2.0) / hf,
        rect.w as f64 / wf,
        rect.h as f64 / hf,
    ])
}

/// `1 - cos(a, b)`, clamped to `[0, 1]`; 0 when either histogram is empty.
pub fn histogram_contrast(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = (1.0 - dot / (na * nb)).clamp(0.0, 1.0);
    if c < CANCELLATION_EPS {
        0.0
    } else {
        c
    }
}

pub fn color_features(rect: &Rect, tables: &ColorTables) -> Result<[f64; 6]> {
    check_inside(rect, tables.width, tables.height)?;
    let area = rect.area() as f64;
    let surround = rect.dilate_clipped(SURROUND_FACTOR, tables.width, tables.height);
    let has_surround = surround.area() > rect.area();
    let mut out = [0.0; 6];
    for c in 0..3 {
        let mean = tables.sums[c].sum(rect) / area;
        let var = tables.squares[c].sum(rect) / area - mean * mean;
        // cancellation residue from the one-pass formula
        out[c] = if var < CANCELLATION_EPS { 0.0 } else { var };
        if has_surround {
            let mut inside = [0.0; COLOR_BINS];
            let mut around = [0.0; COLOR_BINS];
            tables.hists[c].accumulate(rect, &mut inside);
            tables.hists[c].accumulate(&surround, &mut around);
            for (o, i) in around.iter_mut().zip(&inside) {
                *o -= i;
            }
            out[3 + c] = histogram_contrast(&inside, &around);
        }
    }
    Ok(out)
}

pub fn build_feature_vector(
    proposal: &Proposal,
    edge: &EnhancedEdgeMap,
    edge_integral: &IntegralImage,
    color: &ColorTables,
) -> Result<FeatureVector> {
    if (color.width, color.height) != (edge.width(), edge.height()) {
        return Err(Error::Contract("color tables and edge map differ in size".into()));
    }
    let r = &proposal.rect;
    let mut v = [0.0; FEATURE_DIM];
    v[0..7].copy_from_slice(&edge_structure_features(r, edge, edge_integral)?);
    v[7..13].copy_from_slice(&geometry_features(r, edge.width(), edge.height())?);
    v[13] = proposal.objectness;
    v[14..20].copy_from_slice(&color_features(r, color)?);
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("feature {} is not finite", FEATURE_NAMES[i])));
    }
    Ok(FeatureVector(v))
}

/// Writes one row per vector, 20 columns, 9 significant digits.
pub fn write_features_csv<W: Write>(out: W, vectors: &[FeatureVector]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(format!("feature csv: {e}"));
    wtr.write_record(FEATURE_NAMES).map_err(err)?;
    for v in vectors {
        wtr.write_record(v.0.iter().map(|x| format!("{x:.8e}"))).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("feature csv: {e}")))
}
