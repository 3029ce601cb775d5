//! Synthetic perspective road scenes with long-tailed obstacle sizes.
//!
//! A road trapezoid narrows toward the horizon; obstacles sit on the road
//! with their bottom row tied to their size (bigger means closer). Lane
//! marks, shadows, terrain texture and roadside clutter supply edges that
//! are not obstacles.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::rng::stream_rng;

/// Minimum luminance gap between an obstacle and the road surface.
const MIN_OBSTACLE_CONTRAST: f32 = 35.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    /// Row of the vanishing line.
    pub horizon: u32,
    pub min_area: f64,
    pub max_area: f64,
    /// Density of obstacle pixel areas is proportional to `A^-area_exponent`.
    pub area_exponent: f64,
    pub max_obstacles: usize,
    pub shadows: usize,
    /// Object-like shapes beside the road, labelled background.
    pub clutter: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            horizon: 40,
            min_area: 60.0,
            max_area: 1500.0,
            area_exponent: 1.5,
            max_obstacles: 3,
            shadows: 2,
            clutter: 3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.horizon < 4 || self.horizon + 16 > self.height {
            return Err(Error::Config(format!("horizon {} leaves no room for the road", self.horizon)));
        }
        if !(self.min_area >= 4.0 && self.max_area > self.min_area) {
            return Err(Error::Config(format!(
                "obstacle areas need 4 <= min < max (got {}..{})",
                self.min_area, self.max_area
            )));
        }
        if !(self.area_exponent > 0.0 && self.area_exponent != 1.0) {
            return Err(Error::Config(format!("area_exponent must be positive and not 1, got {}", self.area_exponent)));
        }
        if self.max_obstacles == 0 {
            return Err(Error::Config("max_obstacles must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    /// 0 background, 1 road, 2 + i for obstacle `i`.
    pub labels: GrayImage,
    pub obstacles: Vec<Rect>,
}

/// Truncated power-law draw by inverse CDF.
pub fn sample_area<R: Rng>(rng: &mut R, p: &SynthParams) -> f64 {
    let e = 1.0 - p.area_exponent;
    let (lo, hi) = (p.min_area.powf(e), p.max_area.powf(e));
    (lo + rng.gen::<f64>() * (hi - lo)).powf(1.0 / e)
}

struct Road {
    horizon: f64,
    height: f64,
    top_center: f64,
    bottom_center: f64,
    top_half: f64,
    bottom_half: f64,
}

impl Road {
    /// Road span `[left, right)` on row `y`, empty above the horizon.
    fn span(&self, y: u32) -> (f64, f64) {
        let t = (y as f64 + 0.5 - self.horizon) / (self.height - self.horizon);
        if t <= 0.0 {
            return (0.0, 0.0);
        }
        let c = self.top_center + (self.bottom_center - self.top_center) * t;
        let hw = self.top_half + (self.bottom_half - self.top_half) * t;
        (c - hw, c + hw)
    }

    fn contains(&self, x: u32, y: u32) -> bool {
        let (l, r) = self.span(y);
        let xc = x as f64 + 0.5;
        xc >= l && xc < r
    }

    /// Whole box on the road: every pixel centre inside the trapezoid.
    fn holds(&self, b: &Rect) -> bool {
        (b.y..b.bottom()).all(|y| self.contains(b.x, y) && self.contains(b.right() - 1, y))
    }
}

/// Smooth noise in `[-1, 1]` from a bilinearly interpolated coarse grid.
fn value_noise(rng: &mut ChaCha8Rng, w: u32, h: u32, cell: u32) -> Vec<f32> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let fy = y as f32 / cell as f32;
            let (ix, iy) = (fx as u32, fy as u32);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let g = |a: u32, b: u32| grid[(b * gw + a) as usize];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn luma(c: &[f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Random colour whose brightness stands apart from `level`.
fn contrasting_color(rng: &mut ChaCha8Rng, level: f32) -> [f32; 3] {
    loop {
        let c = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.35..0.9), rng.gen_range(0.2..0.95));
        if (luma(&c) - level).abs() >= MIN_OBSTACLE_CONTRAST {
            return c;
        }
    }
}

fn place_obstacle(rng: &mut ChaCha8Rng, p: &SynthParams, road: &Road, taken: &[Rect]) -> Option<Rect> {
    let road_rows = (p.height - p.horizon) as f64;
    for _ in 0..20 {
        let area = sample_area(rng, p);
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let w = ((area * aspect).sqrt().round() as u32).max(3);
        let h = ((area / aspect).sqrt().round() as u32).max(3);
        // apparent size grows linearly with distance below the horizon
        let depth = ((area / p.max_area).sqrt() * rng.gen_range(0.85..1.1)).clamp(0.12, 1.0);
        let bottom = (p.horizon as f64 + depth * road_rows).round().min(p.height as f64) as u32;
        if bottom < p.horizon + h {
            continue;
        }
        let top = bottom - h;
        let (l, r) = road.span(top);
        let (l, r) = (l.ceil().max(0.0) as u32, (r.floor() as u32).min(p.width));
        if r <= l + w {
            continue;
        }
        for _ in 0..10 {
            let x = rng.gen_range(l..=r - w);
            let b = Rect::new(x, top, w, h);
            let padded = Rect::new(x.saturating_sub(2), top.saturating_sub(2), w + 4, h + 4);
            if road.holds(&b) && taken.iter().all(|t| padded.intersection(t).is_none()) {
                return Some(b);
            }
        }
    }
    None
}

/// Renders one scene from its own RNG stream.
pub fn generate_scene(p: &SynthParams, rng: &mut ChaCha8Rng) -> Scene {
    let (w, h) = (p.width, p.height);
    let wf = w as f64;
    let road = Road {
        horizon: p.horizon as f64,
        height: h as f64,
        top_center: wf / 2.0 + rng.gen_range(-0.1..0.1) * wf,
        bottom_center: wf / 2.0 + rng.gen_range(-0.06..0.06) * wf,
        top_half: 3.0,
        bottom_half: wf * rng.gen_range(0.38..0.46),
    };

    let terrain_noise = value_noise(rng, w, h, 12);
    let road_noise = value_noise(rng, w, h, 20);
    let terrain_hue: f32 = rng.gen_range(70.0..130.0);
    let road_level: f32 = rng.gen_range(95.0..125.0);
    let mut pix = vec![[0f32; 3]; (w * h) as usize];
    let mut labels = vec![0u8; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let grain: f32 = rng.gen_range(-6.0..6.0);
            pix[i] = if y < p.horizon {
                let t = y as f32 / p.horizon as f32;
                [150.0 + 40.0 * t + grain, 180.0 + 30.0 * t + grain, 225.0 + grain]
            } else if road.contains(x, y) {
                labels[i] = 1;
                let v = road_level + 10.0 * road_noise[i] + grain;
                [v, v, v + 4.0]
            } else {
                let n = terrain_noise[i];
                let c = hsv_to_rgb(terrain_hue + 20.0 * n, 0.45 + 0.15 * n, 0.45 + 0.12 * n);
                [c[0] + 2.0 * grain, c[1] + 2.0 * grain, c[2] + 2.0 * grain]
            };
        }
    }

    // dashed centre line on some roads, scaled with distance
    let lane_level: f32 = road_level + rng.gen_range(30.0..50.0);
    let mut y = if rng.gen_bool(0.5) { p.horizon + 2 } else { h };
    let mut on = true;
    while y < h {
        let t = (y - p.horizon) as f64 / (h - p.horizon) as f64;
        let run = (2.0 + 10.0 * t).round() as u32;
        if on {
            for yy in y..(y + run).min(h) {
                let (l, r) = road.span(yy);
                let c = (l + r) / 2.0;
                let half = 0.5 + 1.5 * t;
                let (x0, x1) = ((c - half).round().max(0.0) as u32, ((c + half).round() as u32).min(w));
                for x in x0..x1 {
                    pix[(yy * w + x) as usize] = [lane_level, lane_level, lane_level - 8.0];
                }
            }
        }
        y += run;
        on = !on;
    }

    // soft shadows on the road
    for _ in 0..p.shadows {
        let cy = rng.gen_range(p.horizon + 5..h) as f64;
        let t = (cy - p.horizon as f64) / (h - p.horizon) as f64;
        let (l, r) = road.span(cy as u32);
        let cx = rng.gen_range(l..r.max(l + 1.0));
        let (rx, ry) = (rng.gen_range(6.0..24.0) * t + 2.0, rng.gen_range(2.0..8.0) * t + 1.0);
        let dark: f32 = rng.gen_range(0.65..0.85);
        for yy in (cy - ry).max(0.0) as u32..((cy + ry) as u32).min(h) {
            for x in (cx - rx).max(0.0) as u32..((cx + rx) as u32).min(w) {
                let d = ((x as f64 - cx) / rx).powi(2) + ((yy as f64 - cy) / ry).powi(2);
                if d < 1.0 && labels[(yy * w + x) as usize] == 1 {
                    let px = &mut pix[(yy * w + x) as usize];
                    for c in px.iter_mut() {
                        *c *= dark;
                    }
                }
            }
        }
    }

    // posts and bushes hugging the road edge, painted only off the road
    let terrain_level = luma(&hsv_to_rgb(terrain_hue, 0.45, 0.45));
    let road_rows = (h - p.horizon) as f64;
    for _ in 0..p.clutter {
        let area = sample_area(rng, p);
        let aspect: f64 = rng.gen_range(0.3..1.5);
        let cw = ((area * aspect).sqrt().round() as u32).max(3);
        let ch = ((area / aspect).sqrt().round() as u32).max(3);
        let depth = ((area / p.max_area).sqrt() * rng.gen_range(0.85..1.1)).clamp(0.12, 1.0);
        let bottom = (p.horizon as f64 + depth * road_rows).round().min(h as f64) as u32;
        let top = bottom.saturating_sub(ch);
        let (l, r) = road.span(bottom.saturating_sub(1));
        let gap: f64 = rng.gen_range(-2.0..4.0);
        let x0 = if rng.gen_bool(0.5) { l - gap - cw as f64 } else { r + gap };
        let base = contrasting_color(rng, terrain_level);
        for yy in top..bottom {
            let shade = 1.0 - 0.25 * (yy - top) as f32 / ch as f32;
            for xi in 0..cw as i64 {
                let x = x0.round() as i64 + xi;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                let i = (yy * w + x as u32) as usize;
                if labels[i] != 0 {
                    continue;
                }
                let grain: f32 = rng.gen_range(-8.0..8.0);
                pix[i] = [base[0] * shade + grain, base[1] * shade + grain, base[2] * shade + grain];
            }
        }
    }

    let n_obstacles = rng.gen_range(1..=p.max_obstacles);
    let mut obstacles: Vec<Rect> = Vec::new();
    for _ in 0..n_obstacles {
        let Some(b) = place_obstacle(rng, p, &road, &obstacles) else { continue };
        let id = 2 + obstacles.len() as u8;
        let base = contrasting_color(rng, road_level);
        for yy in b.y..b.bottom() {
            // darker toward the ground contact
            let shade = 1.0 - 0.25 * (yy - b.y) as f32 / b.h as f32;
            for x in b.x..b.right() {
                let i = (yy * w + x) as usize;
                let grain: f32 = rng.gen_range(-8.0..8.0);
                pix[i] = [base[0] * shade + grain, base[1] * shade + grain, base[2] * shade + grain];
                labels[i] = id;
            }
        }
        obstacles.push(b);
    }

    let raw: Vec<u8> = pix.iter().flat_map(|c| c.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
    Scene {
        image: RgbImage::from_raw(w, h, raw).expect("buffer matches dimensions"),
        labels: GrayImage::from_raw(w, h, labels).expect("buffer matches dimensions"),
        obstacles,
    }
}

/// Writes `n_train + n_test` scenes plus `manifest.json` under `out`.
///
/// Layout: `images/<id>.png`, `labels/<id>.png`, `obstacles/<id>.png`.
pub fn synth_generate(
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    p: &SynthParams,
) -> Result<DatasetManifest> {
    p.validate()?;
    if n_train + n_test == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    for sub in ["images", "labels", "obstacles"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records: Vec<ManifestRecord> = (0..n_train + n_test)
        .into_par_iter()
        .map(|i| {
            let (split, id) = if i < n_train {
                (Split::Train, format!("train_{i:04}"))
            } else {
                (Split::Test, format!("test_{:04}", i - n_train))
            };
            let scene = generate_scene(p, &mut stream_rng(seed, i as u64));
            let image = format!("images/{id}.png");
            let label_mask = format!("labels/{id}.png");
            let obstacle_mask = format!("obstacles/{id}.png");
            let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, rel: &str| {
                let path = out.join(rel);
                img(&path).map_err(|e| Error::image(&path, e))
            };
            save(&|path| scene.image.save(path), &image)?;
            save(&|path| scene.labels.save(path), &label_mask)?;
            let obstacle_img = GrayImage::from_fn(p.width, p.height, |x, y| {
                Luma([if scene.labels.get_pixel(x, y).0[0] >= 2 { 255 } else { 0 }])
            });
            save(&|path| obstacle_img.save(path), &obstacle_mask)?;
            Ok(ManifestRecord {
                id,
                image: image.into(),
                label_mask: label_mask.into(),
                obstacle_mask: Some(obstacle_mask.into()),
                edge_map: None,
                obstacles: scene.obstacles,
                split,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(records, out);
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
