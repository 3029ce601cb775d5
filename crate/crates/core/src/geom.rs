//! Axis-aligned pixel rectangles.
//!
//! Coordinates use a top-left origin with `y` growing downward. A rectangle
//! covers columns `x..x + w` and rows `y..y + h`, so [`Rect::bottom`] is the
//! first row *below* the box.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Exclusive right edge.
    #[inline]
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    /// Exclusive bottom edge; equals the bottom row used for vertical ranges.
    #[inline]
    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    #[inline]
    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    /// True when the rectangle fits in a `width` x `height` image.
    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Smallest rectangle enclosing both.
    pub fn union_bounds(&self, other: &Rect) -> Rect {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Shrinks by `margin` on every side; `None` when nothing is left.
    pub fn shrink(&self, margin: u32) -> Option<Rect> {
        if self.w <= 2 * margin || self.h <= 2 * margin {
            return None;
        }
        Some(Rect::new(self.x + margin, self.y + margin, self.w - 2 * margin, self.h - 2 * margin))
    }

    /// Width of the border strip used by objectness and edge density:
    /// `max(1, round(0.1 * min(w, h)))`.
    pub fn border_width(&self) -> u32 {
        ((0.1 * self.w.min(self.h) as f64).round() as u32).max(1)
    }

    /// Centered box with half the width and height (at least 1x1).
    pub fn inner_ring(&self) -> Rect {
        let w = (self.w / 2).max(1);
        let h = (self.h / 2).max(1);
        Rect::new(self.x + (self.w - w) / 2, self.y + (self.h - h) / 2, w, h)
    }

    /// Box scaled by `factor` about its center, clipped to the image.
    pub fn dilate_clipped(&self, factor: f64, width: u32, height: u32) -> Rect {
        let cx = self.x as f64 + self.w as f64 / 2.0;
        let cy = self.y as f64 + self.h as f64 / 2.0;
        let hw = self.w as f64 * factor / 2.0;
        let hh = self.h as f64 * factor / 2.0;
        let x0 = (cx - hw).floor().max(0.0) as u32;
        let y0 = (cy - hh).floor().max(0.0) as u32;
        let x1 = ((cx + hw).ceil() as u32).min(width);
        let y1 = ((cy + hh).ceil() as u32).min(height);
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b).map_or(0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
