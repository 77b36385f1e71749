//! Summed-area tables over `[rows, cols, channels]` maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle of cells, `height x width` starting at `(top, left)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        (self.top..self.bottom()).contains(&i) && (self.left..self.right()).contains(&j)
    }

    /// True when `other` lies entirely inside `self`. Empty rects are contained everywhere.
    pub fn contains(&self, other: &Rect) -> bool {
        other.area() == 0
            || (self.top <= other.top
                && self.left <= other.left
                && other.bottom() <= self.bottom()
                && other.right() <= self.right())
    }
}

/// Prefix sums with a zero guard row and column.
///
/// Entry `(i, j, k)` holds the sum of `m[a, b, k]` over `a < i`, `b < j`.
/// Accumulation is done in `f64`.
#[derive(Clone, Debug)]
pub struct SummedAreaTable {
    rows: usize,
    cols: usize,
    channels: usize,
    table: Vec<f64>,
}

impl SummedAreaTable {
    pub fn build(map: &Tensor) -> Result<Self> {
        let (h, w, c) = map.dims3()?;
        Ok(Self::from_slice(map.data(), h, w, c))
    }

    pub(crate) fn from_slice(data: &[f32], rows: usize, cols: usize, channels: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols * channels);
        let stride = (cols + 1) * channels;
        let mut table = vec![0.0f64; (rows + 1) * stride];
        let mut row_acc = vec![0.0f64; channels];
        for i in 0..rows {
            row_acc.iter_mut().for_each(|v| *v = 0.0);
            let (above, below) = table.split_at_mut((i + 1) * stride);
            let prev = &above[i * stride..];
            let cur = &mut below[..stride];
            for j in 0..cols {
                let src = &data[(i * cols + j) * channels..][..channels];
                let base = (j + 1) * channels;
                for k in 0..channels {
                    row_acc[k] += src[k] as f64;
                    cur[base + k] = prev[base + k] + row_acc[k];
                }
            }
        }
        SummedAreaTable {
            rows,
            cols,
            channels,
            table,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Raw table entry; `i <= rows`, `j <= cols`.
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.table[(i * (self.cols + 1) + j) * self.channels + k]
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * (self.cols + 1) + j) * self.channels;
        &self.table[start..start + self.channels]
    }

    /// Per-channel sum over `rect`, narrowed to `f32`.
    pub fn window_sum(&self, rect: Rect) -> Result<Vec<f32>> {
        if rect.bottom() > self.rows || rect.right() > self.cols {
            return Err(Error::Bounds(format!(
                "rect {rect:?} exceeds a {}x{} map",
                self.rows, self.cols
            )));
        }
        let mut out = vec![0.0; self.channels];
        self.add_rect_sum(rect, &mut out);
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    /// Adds `sum(rect)` per channel into `acc`. Bounds are the caller's job.
    #[inline]
    pub(crate) fn add_rect_sum(&self, rect: Rect, acc: &mut [f64]) {
        if rect.area() == 0 {
            return;
        }
        let (t, l, b, r) = (rect.top, rect.left, rect.bottom(), rect.right());
        let br = self.entry(b, r);
        let tr = self.entry(t, r);
        let bl = self.entry(b, l);
        let tl = self.entry(t, l);
        for k in 0..self.channels {
            acc[k] += (br[k] - tr[k]) - (bl[k] - tl[k]);
        }
    }

    /// Total per-channel sum of the source map.
    pub fn totals(&self) -> Vec<f64> {
        self.entry(self.rows, self.cols).to_vec()
    }
}

/// Convenience wrapper matching the free-function style used elsewhere.
pub fn build_sat(map: &Tensor) -> Result<SummedAreaTable> {
    SummedAreaTable::build(map)
}
