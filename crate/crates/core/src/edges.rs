//! Edge probability maps and the multilayer enhancement pathway.
//!
//! The learned structured-edge and occlusion stages are not part of this
//! crate. Maps come either from [`detect_edges_baseline`] (smoothed luminance
//! gradient) or from precomputed 16-bit PNGs via [`load_edge_map`].

use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::mlregions::MLRegionSet;

/// Per-pixel edge probability in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl EdgeMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("edge map has zero area".into()));
        }
        if values.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "edge map of {}x{} needs {} values, got {}",
                width,
                height,
                width as usize * height as usize,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("edge value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// Edge map after multilayer summation over `R_1`.
///
/// Uses the full image layout; pixels outside `R_1` are zero with
/// multiplicity 0.
#[derive(Clone, Debug)]
pub struct EnhancedEdgeMap {
    width: u32,
    height: u32,
    region: Rect,
    values: Vec<f32>,
    unclamped: Vec<f64>,
    multiplicity: Vec<u8>,
}

impl EnhancedEdgeMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// The outermost region `R_1` the enhancement covers.
    pub fn region(&self) -> Rect {
        self.region
    }

    /// Clamped values in `[0, 1]`.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn unclamped(&self) -> &[f64] {
        &self.unclamped
    }

    pub fn multiplicity(&self) -> &[u8] {
        &self.multiplicity
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// The clamped values as a plain edge map.
    pub fn to_edge_map(&self) -> EdgeMap {
        EdgeMap { width: self.width, height: self.height, values: self.values.clone() }
    }
}

/// ITU-R BT.601 luma in `[0, 1]`.
pub fn luminance(image: &RgbImage) -> Vec<f32> {
    image.pixels().map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0).collect()
}

/// Central-difference gradient magnitude of the luminance, smoothed with a
/// 3x3 binomial kernel, divided by its 99th percentile and clamped to `[0, 1]`.
pub fn detect_edges_baseline(image: &RgbImage) -> Result<EdgeMap> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("image has zero area".into()));
    }
    let lum = luminance(image);
    let (wi, hi) = (w as i64, h as i64);
    let at = |x: i64, y: i64| lum[(y.clamp(0, hi - 1) * wi + x.clamp(0, wi - 1)) as usize];

    let mut grad = vec![0f32; lum.len()];
    for y in 0..hi {
        for x in 0..wi {
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
            grad[(y * wi + x) as usize] = (gx * gx + gy * gy).sqrt();
        }
    }

    // separable [1 2 1] / 4 smoothing, replicate border
    let smooth = |src: &[f32], dx: i64, dy: i64| -> Vec<f32> {
        let g = |x: i64, y: i64| src[(y.clamp(0, hi - 1) * wi + x.clamp(0, wi - 1)) as usize];
        let mut out = vec![0f32; src.len()];
        for y in 0..hi {
            for x in 0..wi {
                out[(y * wi + x) as usize] = (g(x - dx, y - dy) + 2.0 * g(x, y) + g(x + dx, y + dy)) * 0.25;
            }
        }
        out
    };
    let smoothed = smooth(&smooth(&grad, 1, 0), 0, 1);

    let mut sorted = smoothed.clone();
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let (_, p99, _) = sorted.select_nth_unstable_by(rank, f32::total_cmp);
    let mut scale = *p99;
    if scale <= 0.0 {
        scale = smoothed.iter().copied().fold(0.0, f32::max);
    }
    let values = if scale > 0.0 {
        smoothed.iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; smoothed.len()]
    };
    EdgeMap::new(w, h, values)
}

/// Reads a single-channel 16-bit PNG as `stored / 65535`.
pub fn load_edge_map(path: &Path) -> Result<EdgeMap> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?;
    let color = img.color();
    let channels = color.channel_count();
    let depth = color.bits_per_pixel() / channels as u16;
    if channels != 1 {
        return Err(Error::Format(format!(
            "{}: edge map must have 1 channel, found {} channels",
            path.display(),
            channels
        )));
    }
    if depth != 16 {
        return Err(Error::Format(format!(
            "{}: edge map must have 16-bit depth, found {}-bit depth",
            path.display(),
            depth
        )));
    }
    let buf = img.into_luma16();
    let (w, h) = buf.dimensions();
    EdgeMap::new(w, h, buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
}

/// Writes `round(value * 65535)` as a single-channel 16-bit PNG.
pub fn save_edge_map(map: &EdgeMap, path: &Path) -> Result<()> {
    save_unit_png16(map.width, map.height, &map.values, path)
}

pub(crate) fn save_unit_png16(width: u32, height: u32, values: &[f32], path: &Path) -> Result<()> {
    let raw: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width, height, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Sums the clipped maps `E_K … E_1` into `R_1`: each pixel's unclamped value
/// is its region multiplicity times `E`, stored clamped to 1.
pub fn enhance_edges(edge: &EdgeMap, regions: &MLRegionSet) -> Result<EnhancedEdgeMap> {
    let (w, h) = (edge.width, edge.height);
    for (k, r) in regions.regions().iter().enumerate() {
        if !r.fits_in(w, h) {
            return Err(Error::InvalidInput(format!("region {} {:?} exceeds the {}x{} edge map", k + 1, r, w, h)));
        }
    }
    let n = w as usize * h as usize;
    let mut unclamped = vec![0f64; n];
    let mut multiplicity = vec![0u8; n];
    // deepest layer first, each clipped map added onto the one below it
    for r in regions.regions().iter().rev() {
        for y in r.y..r.bottom() {
            let row = y as usize * w as usize;
            for x in r.x..r.right() {
                let i = row + x as usize;
                unclamped[i] += edge.values[i] as f64;
                multiplicity[i] = multiplicity[i].saturating_add(1);
            }
        }
    }
    let values = unclamped.iter().map(|&v| v.min(1.0) as f32).collect();
    Ok(EnhancedEdgeMap { width: w, height: h, region: regions.regions()[0], values, unclamped, multiplicity })
}
