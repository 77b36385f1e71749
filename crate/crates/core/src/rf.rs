//! Receptive-field arithmetic for stacks of valid (unpadded) convolutions.
//!
//! Feature cell `i` on an axis sees pixels `[offset + i*stride, offset + i*stride + size)`.
//! A square patch of `p` pixels can therefore corrupt at most
//! `ceil((p + size - 1) / stride)` consecutive cells per axis, which is the mask
//! window size used by the defense.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        let spec = ConvLayerSpec { kernel, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "kernel and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Output extent of a valid convolution, or a shape error if the input is too small.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if input < self.kernel {
            return Err(Error::Shape(format!(
                "input extent {input} is smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((input - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub stride: usize,
    pub offset: usize,
}

impl ReceptiveField {
    /// First pixel seen by feature cell `i`.
    pub fn cell_start(&self, i: usize) -> usize {
        self.offset + i * self.stride
    }
}

pub fn compose_receptive_field(layers: &[ConvLayerSpec]) -> Result<ReceptiveField> {
    if layers.is_empty() {
        return Err(Error::Config("backbone has no layers".into()));
    }
    let mut size = 1;
    let mut jump = 1;
    for layer in layers {
        layer.validate()?;
        size += (layer.kernel - 1) * jump;
        jump *= layer.stride;
    }
    Ok(ReceptiveField {
        size,
        stride: jump,
        offset: 0,
    })
}

/// Feature extent along one axis after running every layer.
pub fn feature_extent(layers: &[ConvLayerSpec], input: usize) -> Result<usize> {
    layers
        .iter()
        .try_fold(input, |extent, layer| layer.output_extent(extent))
}

/// Mask window size in feature cells, before clamping to the feature map.
pub fn mask_window_size(patch: usize, rf: &ReceptiveField) -> usize {
    (patch + rf.size - 1).div_ceil(rf.stride)
}

/// Inclusive interval of feature cells `[lo, hi]` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellSpan {
    pub lo: usize,
    pub hi: usize,
}

impl CellSpan {
    /// Number of cells in the span (always at least one).
    pub fn count(&self) -> usize {
        self.hi - self.lo + 1
    }
}

/// Feature cells whose receptive field intersects the pixels `[start, start + patch)`.
///
/// Returns `None` when the patch only touches border pixels that no cell sees
/// (possible when `(extent - size)` is not a multiple of the stride).
pub fn affected_feature_interval(
    start: usize,
    patch: usize,
    rf: &ReceptiveField,
    n_cells: usize,
    image_extent: usize,
) -> Result<Option<CellSpan>> {
    if patch == 0 || start + patch > image_extent {
        return Err(Error::Bounds(format!(
            "patch [{start}, {}) does not fit in extent {image_extent}",
            start + patch
        )));
    }
    if n_cells == 0 {
        return Ok(None);
    }
    let end = start + patch;
    if end <= rf.offset {
        return Ok(None);
    }
    // smallest i with offset + i*s + r > start
    let lo = if start + 1 >= rf.offset + rf.size {
        (start + 1 - rf.offset - rf.size).div_ceil(rf.stride)
    } else {
        0
    };
    // largest i with offset + i*s < end
    let hi = ((end - 1 - rf.offset) / rf.stride).min(n_cells - 1);
    if lo > hi {
        return Ok(None);
    }
    Ok(Some(CellSpan { lo, hi }))
}

/// Start of a `window`-cell span that contains `span`, preferring the span's own start.
pub fn covering_window_start(
    span: Option<CellSpan>,
    window: usize,
    n_cells: usize,
) -> Option<usize> {
    let window = window.min(n_cells);
    let Some(span) = span else {
        return Some(0);
    };
    let start = span.lo.min(n_cells - window);
    (span.hi < start + window).then_some(start)
}

/// Square patch size, given in pixels or as a fraction of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSize {
    Pixels(usize),
    Fraction(f64),
}

/// Square-patch threat model resolved to pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub patch: usize,
}

impl ThreatModel {
    /// Resolves a patch size against an image of `rows x cols` pixels.
    /// Fractions round up: `ceil(sqrt(fraction * rows * cols))`.
    pub fn resolve(size: PatchSize, rows: usize, cols: usize) -> Result<Self> {
        let patch = match size {
            PatchSize::Pixels(p) => p,
            PatchSize::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "patch fraction must be in (0, 1], got {f}"
                    )));
                }
                (f * rows as f64 * cols as f64).sqrt().ceil() as usize
            }
        };
        if patch == 0 || patch > rows.min(cols) {
            return Err(Error::Config(format!(
                "patch size {patch} must be in [1, {}]",
                rows.min(cols)
            )));
        }
        Ok(ThreatModel { patch })
    }
}
