//! Sliding-window masking in feature space.
//!
//! Two routes compute `M((1 - w) * u)` for every window `w`:
//!
//! * [`masked_prediction_naive`] zeroes the window in the feature map and re-runs
//!   the head on the whole map.
//! * [`MaskedEvidence`] builds prefix sums of the class evidence once and reads
//!   each window's masked logits in O(classes).
//!
//! The fast route sums the evidence *outside* the window as four bands (above,
//! below, left, right), each read from table entries that only cover cells outside
//! the window. Masked logits therefore depend on the unmasked cells alone, bit for
//! bit: whatever an attacker writes inside a window cannot leak into that window's
//! masked prediction through rounding.

use serde::{Deserialize, Serialize};

use crate::backbone::{evidence_map, logits_from_sums, predict, ModelWeights, Prediction};
use crate::error::{Error, Result};
use crate::sat::{Rect, SummedAreaTable};
use crate::tensor::Tensor;

/// A block of feature cells to mask, `height x width` at `(top, left)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn rect(&self) -> Rect {
        Rect::new(self.top, self.left, self.height, self.width)
    }
}

/// Every `w x w` window at stride 1, in row-major order of the top-left corner.
///
/// `w` is clamped to each axis independently, so on an axis shorter than `w`
/// the window spans the whole axis and has a single position.
pub fn enumerate_windows(rows: usize, cols: usize, w: usize) -> Result<Vec<Window>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "feature map {rows}x{cols} has no cells"
        )));
    }
    if w == 0 {
        return Err(Error::Config("mask window size must be >= 1".into()));
    }
    let (height, width) = (w.min(rows), w.min(cols));
    let mut out = Vec::with_capacity((rows - height + 1) * (cols - width + 1));
    for top in 0..=rows - height {
        for left in 0..=cols - width {
            out.push(Window {
                top,
                left,
                height,
                width,
            });
        }
    }
    Ok(out)
}

/// Reference route: zero the window in `u`, then predict on the full map.
pub fn masked_prediction_naive(
    u: &Tensor,
    window: Window,
    weights: &ModelWeights,
) -> Result<Prediction> {
    let (h, w, c) = u.dims3()?;
    if window.top + window.height > h || window.left + window.width > w {
        return Err(Error::Bounds(format!(
            "window {window:?} exceeds a {h}x{w} feature map"
        )));
    }
    let mut data = u.data().to_vec();
    for i in window.top..window.top + window.height {
        let row = &mut data[(i * w + window.left) * c..(i * w + window.left + window.width) * c];
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    predict(&Tensor::new(vec![h, w, c], data)?, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedPredictionRecord {
    pub window: Window,
    pub prediction: Prediction,
}

/// Prefix sums of an evidence map from the top-left and from the bottom-right.
#[derive(Clone, Debug)]
pub struct MaskedEvidence {
    rows: usize,
    cols: usize,
    classes: usize,
    from_top_left: SummedAreaTable,
    from_bottom_right: SummedAreaTable,
}

impl MaskedEvidence {
    /// Builds the tables from an evidence map `[rows, cols, classes]`.
    pub fn new(evidence: &Tensor) -> Result<Self> {
        let (rows, cols, classes) = evidence.dims3()?;
        if rows * cols == 0 {
            return Err(Error::Shape("evidence map has no cells".into()));
        }
        let data = evidence.data();
        let mut rotated = Vec::with_capacity(data.len());
        for i in (0..rows).rev() {
            for j in (0..cols).rev() {
                rotated.extend_from_slice(&data[(i * cols + j) * classes..][..classes]);
            }
        }
        Ok(MaskedEvidence {
            rows,
            cols,
            classes,
            from_top_left: SummedAreaTable::from_slice(data, rows, cols, classes),
            from_bottom_right: SummedAreaTable::from_slice(&rotated, rows, cols, classes),
        })
    }

    pub fn from_features(u: &Tensor, weights: &ModelWeights) -> Result<Self> {
        Self::new(&evidence_map(u, weights)?)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Per-class evidence summed over every cell outside `window`.
    pub fn outside_sums(&self, window: Window) -> Vec<f64> {
        let (t, l, h, w) = (window.top, window.left, window.height, window.width);
        debug_assert!(t + h <= self.rows && l + w <= self.cols);
        let (rows, cols) = (self.rows, self.cols);
        let mut acc = vec![0.0f64; self.classes];
        // above and left of the window, from the top-left table
        self.from_top_left
            .add_rect_sum(Rect::new(0, 0, t, cols), &mut acc);
        self.from_top_left
            .add_rect_sum(Rect::new(t, 0, h, l), &mut acc);
        // below and right of the window, from the rotated table
        self.from_bottom_right
            .add_rect_sum(Rect::new(0, 0, rows - t - h, cols), &mut acc);
        self.from_bottom_right
            .add_rect_sum(Rect::new(rows - t - h, 0, h, cols - l - w), &mut acc);
        acc
    }

    /// Masked prediction for one window.
    pub fn predict_masked(&self, window: Window, head_bias: &[f32]) -> Prediction {
        Prediction::from_logits(logits_from_sums(
            &self.outside_sums(window),
            self.cells(),
            head_bias,
        ))
    }
}

/// Masked predictions for every window, in the given order.
pub fn masked_predictions_all(
    evidence: &MaskedEvidence,
    head_bias: &[f32],
    windows: &[Window],
) -> Vec<MaskedPredictionRecord> {
    windows
        .iter()
        .map(|&window| MaskedPredictionRecord {
            window,
            prediction: evidence.predict_masked(window, head_bias),
        })
        .collect()
}
