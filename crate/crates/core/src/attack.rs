//! Empirical falsification of certificates.
//!
//! Two adversaries are swept over every patch placement:
//!
//! * the pixel adversary writes arbitrary content into a square patch and runs
//!   the real network (random, constant and random-search contents);
//! * the feature adversary skips the network and writes arbitrary finite values
//!   straight into every feature cell the patch could reach, which dominates
//!   anything a pixel patch can do.
//!
//! An attempt is a *violation* when the image was certified, the defense raised
//! no alert, and the returned label is not the true one.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{refresh_evidence, ActivationTrace, ModelWeights, Prediction};
use crate::defense::{check_pixels, covering_window, DefenseParams, DetectionOutcome, MaskedView};
use crate::error::{Error, Result};
use crate::sat::Rect;
use crate::tensor::Tensor;

/// Square patch of `size` pixels at `(top, left)`; `content` is `size x size x channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub top: usize,
    pub left: usize,
    pub content: Vec<f32>,
}

impl PatchSpec {
    pub fn rect(&self) -> Rect {
        Rect::new(self.top, self.left, self.size, self.size)
    }
}

/// `x' = (1 - p) * x + p * content`: pixels inside the patch are replaced, the
/// rest are copied unchanged.
pub fn apply_patch(x: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let p = spec.size;
    if p == 0 || spec.top + p > h || spec.left + p > w {
        return Err(Error::Bounds(format!(
            "{p}px patch at ({}, {}) does not fit a {h}x{w} image",
            spec.top, spec.left
        )));
    }
    if spec.content.len() != p * p * c {
        return Err(Error::Shape(format!(
            "patch content has {} values, expected {}",
            spec.content.len(),
            p * p * c
        )));
    }
    if !spec.content.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Validation("patch content must lie in [0, 1]".into()));
    }
    let mut data = x.data().to_vec();
    for r in 0..p {
        let dst = ((spec.top + r) * w + spec.left) * c;
        data[dst..dst + p * c].copy_from_slice(&spec.content[r * p * c..(r + 1) * p * c]);
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pixel,
    Feature,
}

/// Which feature cells the feature adversary may overwrite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRegion {
    /// Exactly the cells whose receptive field meets the patch.
    #[default]
    Affected,
    /// The whole covering mask window.
    CoveringWindow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Attempts per location.
    pub budget: usize,
    /// Pixel stride between tested patch positions (the last row/column is always included).
    pub location_stride: usize,
    pub seed: u64,
    #[serde(default)]
    pub feature_region: FeatureRegion,
}

impl AttackConfig {
    pub fn new(patch: usize, budget: usize, seed: u64) -> Self {
        AttackConfig {
            patch,
            budget,
            location_stride: 1,
            seed,
            feature_region: FeatureRegion::Affected,
        }
    }
}

/// Default location stride: exhaustive up to 64 pixels, coarser beyond.
pub fn default_location_stride(rows: usize, cols: usize) -> usize {
    rows.max(cols).div_ceil(64).max(1)
}

/// One undetected misclassification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Patch rect in pixels (pixel sweep) or corrupted cells (feature sweep).
    pub location: Rect,
    pub attempt: usize,
    pub predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub image_id: String,
    pub attack: AttackKind,
    pub tau: f32,
    pub certified: bool,
    pub locations: usize,
    pub attempts: usize,
    /// Undetected misclassifications on a certified image. Must be empty.
    pub violations: Vec<Violation>,
    /// Undetected misclassifications on an uncertified image, where no guarantee is claimed.
    pub unguarded_successes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unguarded_example: Option<Violation>,
}

impl SoundnessReport {
    fn empty(image_id: &str, attack: AttackKind, tau: f32, certified: bool) -> Self {
        SoundnessReport {
            image_id: image_id.to_string(),
            attack,
            tau,
            certified,
            locations: 0,
            attempts: 0,
            violations: Vec::new(),
            unguarded_successes: 0,
            unguarded_example: None,
        }
    }

    fn absorb(&mut self, loc: LocationResult) {
        self.locations += 1;
        self.attempts += loc.attempts;
        if self.certified {
            self.violations.extend(loc.successes);
        } else {
            self.unguarded_successes += loc.successes.len();
            if self.unguarded_example.is_none() {
                self.unguarded_example = loc.successes.into_iter().next();
            }
        }
    }
}

struct LocationResult {
    attempts: usize,
    successes: Vec<Violation>,
}

/// SplitMix64 finalizer, used to derive independent per-location streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

fn positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

fn validate(
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    cfg: &AttackConfig,
) -> Result<(usize, usize, usize)> {
    check_pixels(x)?;
    let (h, w, c) = x.dims3()?;
    if cfg.patch == 0 || cfg.patch > h.min(w) {
        return Err(Error::Bounds(format!(
            "patch size {} does not fit a {h}x{w} image",
            cfg.patch
        )));
    }
    if y >= weights.num_classes() {
        return Err(Error::Config(format!("label {y} out of range")));
    }
    Ok((h, w, c))
}

/// Margin of the strongest wrong class over the true class in the unmasked logits.
fn attack_margin(pred: &Prediction, y: usize) -> f32 {
    let wrong = pred
        .logits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != y)
        .map(|(_, v)| *v)
        .fold(f32::NEG_INFINITY, f32::max);
    wrong - pred.logits[y]
}

/// Sweeps pixel patches over every location and records undetected misclassifications.
pub fn sweep_pixel_attacks(
    image_id: &str,
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
    cfg: &AttackConfig,
) -> Result<SoundnessReport> {
    let (h, w, c) = validate(x, y, weights, cfg)?;
    let trace = ActivationTrace::new(x, weights)?;
    let certified = MaskedView::from_evidence(trace.evidence(), weights, params.window)?
        .is_certified(y, weights, params.tau);
    let mut report = SoundnessReport::empty(image_id, AttackKind::Pixel, params.tau, certified);
    if cfg.budget == 0 {
        return Ok(report);
    }
    let p = cfg.patch;
    let locs: Vec<(usize, usize)> = positions(h, p, cfg.location_stride)
        .into_iter()
        .flat_map(|t| {
            positions(w, p, cfg.location_stride)
                .into_iter()
                .map(move |l| (t, l))
        })
        .collect();

    let results: Vec<Result<LocationResult>> = locs
        .par_iter()
        .map(|&(top, left)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, top as u64, left as u64));
            let n = p * p * c;
            let mut out = LocationResult {
                attempts: 0,
                successes: Vec::new(),
            };
            let mut best: Option<(f32, Vec<f32>)> = None;
            for attempt in 0..cfg.budget {
                let content: Vec<f32> = match attempt {
                    0 => vec![0.0; n],
                    1 => vec![1.0; n],
                    2 => (0..n).map(|_| rng.gen::<f32>()).collect(),
                    _ => {
                        let base = best
                            .as_ref()
                            .map(|b| b.1.clone())
                            .unwrap_or_else(|| vec![0.5; n]);
                        mutate(&mut rng, base, p, c)
                    }
                };
                let spec = PatchSpec {
                    size: p,
                    top,
                    left,
                    content,
                };
                let edited = apply_patch(x, &spec)?;
                let rerun = trace.rerun_local(&edited, spec.rect(), weights)?;
                let view = MaskedView::from_evidence(&rerun.evidence, weights, params.window)?;
                out.attempts += 1;
                if let DetectionOutcome::Prediction { label } = view.outcome(weights, params.tau) {
                    if label != y {
                        out.successes.push(Violation {
                            location: spec.rect(),
                            attempt,
                            predicted: label,
                            patch: Some(spec.clone()),
                        });
                    }
                }
                let margin = attack_margin(&view.clean, y);
                if best.as_ref().is_none_or(|b| margin > b.0) {
                    best = Some((margin, spec.content));
                }
            }
            Ok(out)
        })
        .collect();
    for r in results {
        report.absorb(r?);
    }
    Ok(report)
}

/// Random-search step: overwrite a random sub-square or scatter of pixels.
fn mutate(rng: &mut ChaCha8Rng, mut content: Vec<f32>, p: usize, c: usize) -> Vec<f32> {
    match rng.gen_range(0..3) {
        0 => {
            let side = rng.gen_range(1..=p);
            let (r0, c0) = (rng.gen_range(0..=p - side), rng.gen_range(0..=p - side));
            for r in r0..r0 + side {
                for q in c0..c0 + side {
                    for k in 0..c {
                        content[(r * p + q) * c + k] = rng.gen();
                    }
                }
            }
        }
        1 => {
            let count = rng.gen_range(1..=(p * p).div_ceil(4));
            for _ in 0..count {
                let px = rng.gen_range(0..p * p);
                let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                let k = rng.gen_range(0..c);
                content[px * c + k] = v;
            }
        }
        _ => {
            for v in content.iter_mut() {
                *v = (*v + rng.gen_range(-0.25f32..0.25)).clamp(0.0, 1.0);
            }
        }
    }
    content
}

/// Feature cells reachable from each tested patch position, deduplicated.
pub fn feature_locations(
    h: usize,
    w: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
    cfg: &AttackConfig,
) -> Result<Vec<Rect>> {
    let mut set = BTreeSet::new();
    for top in positions(h, cfg.patch, cfg.location_stride) {
        for left in positions(w, cfg.patch, cfg.location_stride) {
            let (rows, cols, window) =
                covering_window(top, left, cfg.patch, weights, h, w, params.window)?;
            let rect = match cfg.feature_region {
                FeatureRegion::Affected => match (rows, cols) {
                    (Some(r), Some(c)) => Rect::new(r.lo, c.lo, r.count(), c.count()),
                    _ => continue,
                },
                FeatureRegion::CoveringWindow => window.rect(),
            };
            set.insert(rect);
        }
    }
    Ok(set.into_iter().collect())
}

/// Sweeps direct feature-map corruptions over every reachable cell block.
pub fn sweep_feature_attacks(
    image_id: &str,
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
    cfg: &AttackConfig,
) -> Result<SoundnessReport> {
    let (h, w, _) = validate(x, y, weights, cfg)?;
    let trace = ActivationTrace::new(x, weights)?;
    let certified = MaskedView::from_evidence(trace.evidence(), weights, params.window)?
        .is_certified(y, weights, params.tau);
    let mut report = SoundnessReport::empty(image_id, AttackKind::Feature, params.tau, certified);
    if cfg.budget == 0 {
        return Ok(report);
    }
    let rects = feature_locations(h, w, weights, params, cfg)?;
    let results: Vec<Result<LocationResult>> = rects
        .par_iter()
        .map(|&rect| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                cfg.seed ^ 0x5eed_f00d,
                (rect.top * 65_536 + rect.left) as u64,
                (rect.height * 65_536 + rect.width) as u64,
            ));
            let mut out = LocationResult {
                attempts: 0,
                successes: Vec::new(),
            };
            for attempt in 0..cfg.budget {
                let features =
                    corrupt_features(trace.features(), rect, y, weights, attempt, &mut rng)?;
                let mut evidence = trace.evidence().clone();
                refresh_evidence(&mut evidence, &features, rect, weights);
                let view = MaskedView::from_evidence(&evidence, weights, params.window)?;
                out.attempts += 1;
                if let DetectionOutcome::Prediction { label } = view.outcome(weights, params.tau) {
                    if label != y {
                        out.successes.push(Violation {
                            location: rect,
                            attempt,
                            predicted: label,
                            patch: None,
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    for r in results {
        report.absorb(r?);
    }
    Ok(report)
}

/// Attempt schedule, cycling through:
/// targeted +/-1e6 pushes toward each wrong class, uniform noise in
/// +/-1e6, targeted pushes of random magnitude, and non-negative noise at
/// activation scale.
fn corrupt_features(
    u: &Tensor,
    rect: Rect,
    y: usize,
    weights: &ModelWeights,
    attempt: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, cols, c) = u.dims3()?;
    let classes = weights.num_classes();
    let head = weights.head_matrix().data();
    let wrong: Vec<usize> = (0..classes).filter(|&k| k != y).collect();
    let target = wrong[(attempt / 4) % wrong.len().max(1)];
    let direction: Vec<f32> = (0..c)
        .map(|ch| {
            let d = head[target * c + ch] - head[y * c + ch];
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut data = u.data().to_vec();
    let magnitude: f32 = match attempt % 4 {
        0 => 1e6,
        2 => 10f32.powf(rng.gen_range(0.0..6.0)),
        _ => 0.0,
    };
    for i in rect.top..rect.bottom() {
        for j in rect.left..rect.right() {
            let cell = &mut data[(i * cols + j) * c..(i * cols + j + 1) * c];
            for (ch, v) in cell.iter_mut().enumerate() {
                *v = match attempt % 4 {
                    0 | 2 => magnitude * direction[ch],
                    1 => rng.gen_range(-1e6..1e6),
                    _ => rng.gen_range(0.0..10.0),
                };
            }
        }
    }
    Tensor::new(u.shape().to_vec(), data)
}
