//! Ground-truth pixel classes.
//!
//! Label masks are 8-bit PNGs: 0 = background, 1 = road, ≥2 = obstacle
//! instance ids. An optional second mask (any nonzero pixel = obstacle) is
//! OR-ed into the obstacle class.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::integral::IntegralImage;
use crate::proposals::Category;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMasks {
    width: u32,
    height: u32,
    classes: Vec<Category>,
}

impl SceneMasks {
    pub fn new(width: u32, height: u32, classes: Vec<Category>) -> Result<Self> {
        if classes.len() != width as usize * height as usize {
            return Err(Error::InvalidInput("class mask size does not match its dimensions".into()));
        }
        Ok(Self { width, height, classes })
    }

    pub fn from_label_image(labels: &GrayImage, obstacle: Option<&GrayImage>) -> Result<Self> {
        let (w, h) = labels.dimensions();
        if let Some(o) = obstacle {
            if o.dimensions() != (w, h) {
                return Err(Error::InvalidInput(format!(
                    "obstacle mask is {:?}, label mask is {:?}",
                    o.dimensions(),
                    (w, h)
                )));
            }
        }
        let classes = labels
            .as_raw()
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let extra = obstacle.is_some_and(|o| o.as_raw()[i] != 0);
                match l {
                    _ if extra || l >= 2 => Category::Obstacle,
                    1 => Category::Road,
                    _ => Category::Background,
                }
            })
            .collect();
        Self::new(w, h, classes)
    }

    pub fn load(label_path: &Path, obstacle_path: Option<&Path>) -> Result<Self> {
        let open = |p: &Path| -> Result<GrayImage> {
            let img = image::open(p).map_err(|e| Error::image(p, e))?;
            if img.color() != image::ColorType::L8 {
                return Err(Error::Format(format!(
                    "{}: masks must be 8-bit single-channel, found {:?}",
                    p.display(),
                    img.color()
                )));
            }
            Ok(img.into_luma8())
        };
        let labels = open(label_path)?;
        let obstacle = obstacle_path.map(open).transpose()?;
        Self::from_label_image(&labels, obstacle.as_ref())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn classes(&self) -> &[Category] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Category {
        self.classes[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self, c: Category) -> u64 {
        self.classes.iter().filter(|&&k| k == c).count() as u64
    }

    pub fn integrals(&self) -> ClassIntegrals {
        let ind =
            |c: Category| IntegralImage::from_fn(self.width, self.height, |x, y| (self.get(x, y) == c) as u8 as f64);
        ClassIntegrals {
            width: self.width,
            height: self.height,
            road: ind(Category::Road),
            obstacle: ind(Category::Obstacle),
        }
    }
}

/// Constant-time per-box class counts.
#[derive(Clone, Debug)]
pub struct ClassIntegrals {
    width: u32,
    height: u32,
    road: IntegralImage,
    obstacle: IntegralImage,
}

impl ClassIntegrals {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn road_count(&self, r: &Rect) -> f64 {
        self.road.sum(r)
    }

    pub fn obstacle_count(&self, r: &Rect) -> f64 {
        self.obstacle.sum(r)
    }
}
