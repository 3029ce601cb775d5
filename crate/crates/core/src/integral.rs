//! Summed-area tables.
//!
//! An integral image has one more row and column than its source; entry
//! `(x, y)` holds the sum of all source values strictly above and to the left.
//! Any rectangle sum is then four lookups.

use crate::geom::Rect;

#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: u32,
    height: u32,
    sums: Vec<f64>,
}

impl IntegralImage {
    /// Builds the table from a row-major field of `width * height` values.
    pub fn new<T: Copy + Into<f64>>(width: u32, height: u32, values: &[T]) -> Self {
        assert_eq!(values.len(), width as usize * height as usize);
        Self::from_fn(width, height, |x, y| values[y as usize * width as usize + x as usize].into())
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> f64) -> Self {
        let stride = width as usize + 1;
        let mut sums = vec![0.0; stride * (height as usize + 1)];
        for y in 0..height {
            let mut row = 0.0;
            let base = (y as usize + 1) * stride;
            for x in 0..width {
                row += f(x, y);
                sums[base + x as usize + 1] = sums[base - stride + x as usize + 1] + row;
            }
        }
        Self { width, height, sums }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    fn at(&self, x: u32, y: u32) -> f64 {
        self.sums[y as usize * (self.width as usize + 1) + x as usize]
    }

    /// Sum of source values inside `r`. `r` must fit in the source field.
    #[inline]
    pub fn sum(&self, r: &Rect) -> f64 {
        debug_assert!(r.fits_in(self.width, self.height));
        self.at(r.right(), r.bottom()) - self.at(r.x, r.bottom()) - self.at(r.right(), r.y) + self.at(r.x, r.y)
    }
}

/// Per-bin integral counts, so the histogram of any rectangle costs O(bins).
#[derive(Clone, Debug)]
pub struct HistogramIntegral {
    width: u32,
    height: u32,
    bins: usize,
    counts: Vec<u32>,
}

impl HistogramIntegral {
    /// `bin_of(x, y)` must return a bin index below `bins`.
    pub fn from_fn(width: u32, height: u32, bins: usize, bin_of: impl Fn(u32, u32) -> usize) -> Self {
        let stride = (width as usize + 1) * bins;
        let mut counts = vec![0u32; stride * (height as usize + 1)];
        let mut row = vec![0u32; bins];
        for y in 0..height {
            row.iter_mut().for_each(|c| *c = 0);
            let base = (y as usize + 1) * stride;
            for x in 0..width {
                row[bin_of(x, y)] += 1;
                let cell = base + (x as usize + 1) * bins;
                for b in 0..bins {
                    counts[cell + b] = counts[cell - stride + b] + row[b];
                }
            }
        }
        Self { width, height, bins, counts }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Adds the histogram of `r` into `out` (length `bins`).
    pub fn accumulate(&self, r: &Rect, out: &mut [f64]) {
        debug_assert!(r.fits_in(self.width, self.height));
        let stride = (self.width as usize + 1) * self.bins;
        let cell = |x: u32, y: u32| y as usize * stride + x as usize * self.bins;
        let (a, b, c, d) = (cell(r.right(), r.bottom()), cell(r.x, r.bottom()), cell(r.right(), r.y), cell(r.x, r.y));
        for (k, o) in out.iter_mut().enumerate() {
            let n = self.counts[a + k] as i64 - self.counts[b + k] as i64 - self.counts[c + k] as i64
                + self.counts[d + k] as i64;
            *o += n as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_table() {
        let ii = IntegralImage::new(3, 2, &[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ii.sum(&Rect::new(0, 0, 3, 2)), 21.0);
        assert_eq!(ii.sum(&Rect::new(1, 0, 2, 2)), 2.0 + 3.0 + 5.0 + 6.0);
        assert_eq!(ii.sum(&Rect::new(0, 0, 3, 1)), 6.0);
    }

    proptest! {
        #[test]
        fn rect_sums_match_direct(
            w in 1u32..24, h in 1u32..24,
            seed in any::<u64>(),
            rx in 0u32..24, ry in 0u32..24, rw in 1u32..24, rh in 1u32..24,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
            let ii = IntegralImage::new(w, h, &vals);
            let x = rx % w;
            let y = ry % h;
            let r = Rect::new(x, y, rw.min(w - x), rh.min(h - y));
            let mut direct = 0.0;
            for yy in r.y..r.bottom() {
                for xx in r.x..r.right() {
                    direct += vals[(yy * w + xx) as usize];
                }
            }
            let got = ii.sum(&r);
            prop_assert!((got - direct).abs() <= 1e-6 * direct.abs().max(1e-12));

            let bins: Vec<usize> = vals.iter().map(|v| (v * 4.0) as usize).collect();
            let hi = HistogramIntegral::from_fn(w, h, 4, |x, y| bins[(y * w + x) as usize]);
            let mut hist = vec![0.0; 4];
            hi.accumulate(&r, &mut hist);
            prop_assert_eq!(hist.iter().sum::<f64>(), r.area() as f64);
        }
    }
}
