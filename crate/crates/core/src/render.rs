//! Overlays for inspection: probability heat maps and proposal outlines.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::probmap::ProbabilityMap;

/// Peak opacity of the heat overlay.
const HEAT_OPACITY: f64 = 0.6;
pub const BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Red at low probability to yellow at 1.
fn heat_color(p: f64) -> [f64; 3] {
    [255.0, 255.0 * p, 0.0]
}

/// Blends the heat map over the image with opacity proportional to `P`.
pub fn render_heat(image: &RgbImage, map: &ProbabilityMap) -> Result<RgbImage> {
    if image.dimensions() != (map.width(), map.height()) {
        return Err(Error::Contract(format!(
            "image is {:?} but map is {}x{}",
            image.dimensions(),
            map.width(),
            map.height()
        )));
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = map.get(x, y);
        if p <= 0.0 {
            continue;
        }
        let a = HEAT_OPACITY * p;
        let c = heat_color(p);
        for (v, target) in px.0.iter_mut().zip(c) {
            *v = ((1.0 - a) * *v as f64 + a * target).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Draws the 1-pixel outline of each box.
pub fn render_boxes(image: &RgbImage, boxes: &[Rect], color: Rgb<u8>) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    let mut out = image.clone();
    for b in boxes {
        if b.is_empty() || !b.fits_in(w, h) {
            return Err(Error::Contract(format!("box {b:?} outside the {w}x{h} image")));
        }
        for x in b.x..b.right() {
            out.put_pixel(x, b.y, color);
            out.put_pixel(x, b.bottom() - 1, color);
        }
        for y in b.y..b.bottom() {
            out.put_pixel(b.x, y, color);
            out.put_pixel(b.right() - 1, y, color);
        }
    }
    Ok(out)
}
