//! Batch evaluation: configs, datasets, the tau sweep and the attack sweep.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    default_location_stride, stream_seed, sweep_feature_attacks, sweep_pixel_attacks, AttackConfig,
    SoundnessReport,
};
use crate::backbone::{ActivationTrace, ModelWeights};
use crate::defense::{check_pixels, DefenseParams, DetectionOutcome, MaskedView};
use crate::error::{Error, Result};
use crate::npy::{load_tensor, save_tensor};
use crate::rf::{
    compose_receptive_field, feature_extent, mask_window_size, ConvLayerSpec, PatchSize,
    ThreatModel,
};
use crate::tensor::Tensor;

fn default_budget() -> usize {
    20
}

fn default_workers() -> usize {
    1
}

/// JSON run configuration. Relative paths are resolved against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Layer specs (`kernel`, `stride`; channel fields are accepted and ignored).
    /// Optional when `weights` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Vec<ConvLayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// `[rows, cols]`; falls back to the first dataset image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[usize; 2]>,
    pub patch: PatchSize,
    pub taus: Vec<f32>,
    #[serde(default = "default_budget")]
    pub attack_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_stride: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl EvalConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: EvalConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.weights, &mut cfg.dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(Error::Config("tau list is empty".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Config(format!("tau {t} outside [0, 1)")));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if let Some(arch) = &self.architecture {
            compose_receptive_field(arch)?;
        }
        if self.architecture.is_none() && self.weights.is_none() {
            return Err(Error::Config(
                "config needs an architecture or a weight bundle".into(),
            ));
        }
        Ok(())
    }

    pub fn load_weights(&self) -> Result<ModelWeights> {
        let dir = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::Config("config has no weight bundle".into()))?;
        let weights = ModelWeights::load_bundle(dir)?;
        if let Some(arch) = &self.architecture {
            if *arch != weights.conv_specs() {
                return Err(Error::Config(format!(
                    "architecture {arch:?} does not match the bundle's layers {:?}",
                    weights.conv_specs()
                )));
            }
        }
        Ok(weights)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("config has no dataset".into()))?;
        Dataset::load(dir)
    }

    pub fn layers(&self) -> Result<Vec<ConvLayerSpec>> {
        match &self.architecture {
            Some(a) => Ok(a.clone()),
            None => Ok(self.load_weights()?.conv_specs()),
        }
    }
}

/// Images with integer labels, stored as `<id>.npy` files plus `labels.csv`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, image: Tensor, label: usize) {
        self.ids.push(id.into());
        self.images.push(image);
        self.labels.push(label);
    }

    /// Reads `labels.csv` (`filename,label`, optional header row) and each listed file.
    /// Every `.npy` file in the directory must be listed.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let labels_path = dir.join("labels.csv");
        let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(file);
        let mut out = Dataset::default();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Format(format!(
                    "labels.csv row {} has {} fields, expected 2",
                    row + 1,
                    record.len()
                )));
            }
            let (name, label) = (&record[0], &record[1]);
            let label = match label.parse::<usize>() {
                Ok(l) => l,
                Err(_) if row == 0 => continue,
                Err(_) => {
                    return Err(Error::Format(format!(
                        "labels.csv row {}: bad label '{label}'",
                        row + 1
                    )))
                }
            };
            let image = load_tensor(dir.join(name))?;
            out.push(name, image, label);
        }
        let listed = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "npy"))
            .count();
        if listed != out.len() {
            return Err(Error::Config(format!(
                "labels.csv lists {} images but the directory holds {listed} tensor files",
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let labels_path = dir.join("labels.csv");
        let mut writer = csv::Writer::from_path(&labels_path)?;
        writer.write_record(["filename", "label"])?;
        for ((id, image), label) in self.ids.iter().zip(&self.images).zip(&self.labels) {
            save_tensor(dir.join(id), image)?;
            writer.write_record([id.as_str(), &label.to_string()])?;
        }
        writer.flush().map_err(|e| Error::io(&labels_path, e))?;
        Ok(())
    }

    fn check(&self, weights: &ModelWeights) -> Result<()> {
        if let Some(first) = self.images.first() {
            if let Some((id, x)) = self
                .ids
                .iter()
                .zip(&self.images)
                .find(|(_, x)| x.shape() != first.shape())
            {
                return Err(Error::Shape(format!(
                    "image {id} has shape {:?}, the dataset uses {:?}",
                    x.shape(),
                    first.shape()
                )));
            }
        }
        for (id, (x, &y)) in self.ids.iter().zip(self.images.iter().zip(&self.labels)) {
            if y >= weights.num_classes() {
                return Err(Error::Config(format!(
                    "image {id}: label {y} out of range for {} classes",
                    weights.num_classes()
                )));
            }
            check_pixels(x).map_err(|e| Error::Validation(format!("image {id}: {e}")))?;
        }
        Ok(())
    }
}

/// Geometry summary printed by `rf-info`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfInfo {
    pub receptive_field: usize,
    pub stride: usize,
    pub image: [usize; 2],
    pub features: [usize; 2],
    pub patch: usize,
    /// Window size from the patch and receptive field, before clamping.
    pub mask_window: usize,
    /// Window extent actually used on each axis.
    pub window: [usize; 2],
    pub window_count: usize,
}

pub fn rf_info(layers: &[ConvLayerSpec], image: [usize; 2], patch: PatchSize) -> Result<RfInfo> {
    let rf = compose_receptive_field(layers)?;
    let [rows, cols] = image;
    let features = [feature_extent(layers, rows)?, feature_extent(layers, cols)?];
    let patch = ThreatModel::resolve(patch, rows, cols)?.patch;
    let mask_window = mask_window_size(patch, &rf);
    let window = [mask_window.min(features[0]), mask_window.min(features[1])];
    Ok(RfInfo {
        receptive_field: rf.size,
        stride: rf.stride,
        image,
        features,
        patch,
        mask_window,
        window,
        window_count: (features[0] - window[0] + 1) * (features[1] - window[1] + 1),
    })
}

pub fn rf_info_for_config(cfg: &EvalConfig) -> Result<RfInfo> {
    let image = match cfg.image_size {
        Some(s) => s,
        None => {
            let ds = cfg.load_dataset()?;
            let first = ds
                .images
                .first()
                .ok_or_else(|| Error::Config("dataset is empty and no image_size given".into()))?;
            let (h, w, _) = first.dims3()?;
            [h, w]
        }
    };
    rf_info(&cfg.layers()?, image, cfg.patch)
}

/// Per-image results at one tau.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ImageVerdict {
    label_correct: bool,
    alert: bool,
    certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f32,
    pub images: usize,
    /// Correct label and no alert.
    pub clean_correct: usize,
    /// Correct unmasked label, alerts ignored.
    pub label_correct: usize,
    pub clean_alerts: usize,
    pub certified: usize,
    pub clean_accuracy: f64,
    pub clean_accuracy_ignoring_alerts: f64,
    pub robust_accuracy: f64,
}

/// Clean and provable robust accuracy across a tau grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub patch: usize,
    pub mask_window: usize,
    pub rows: Vec<TauRow>,
}

impl EvalReport {
    /// Aligned text table with one row per tau.
    pub fn table(&self) -> String {
        let mut out = format!(
            "images={} patch={}px window={}\n{:>6}  {:>8}  {:>8}  {:>8}  {:>7}  {:>9}\n",
            self.images,
            self.patch,
            self.mask_window,
            "tau",
            "clean",
            "robust",
            "correct",
            "alerts",
            "certified"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6.3}  {:>7.1}%  {:>7.1}%  {:>8}  {:>7}  {:>9}\n",
                r.tau,
                100.0 * r.clean_accuracy,
                100.0 * r.robust_accuracy,
                r.clean_correct,
                r.clean_alerts,
                r.certified
            ));
        }
        out
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs detection and certification for every image at every tau.
pub fn evaluate(
    weights: &ModelWeights,
    dataset: &Dataset,
    patch: PatchSize,
    taus: &[f32],
    workers: usize,
) -> Result<EvalReport> {
    if taus.is_empty() {
        return Err(Error::Config("tau list is empty".into()));
    }
    for &t in taus {
        DefenseParams::new(t, 1)?;
    }
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    dataset.check(weights)?;
    let (h, w, _) = dataset.images[0].dims3()?;
    let patch = ThreatModel::resolve(patch, h, w)?.patch;
    let window = mask_window_size(patch, &weights.receptive_field());

    let verdicts: Vec<Result<Vec<ImageVerdict>>> = with_pool(workers, || {
        dataset
            .images
            .par_iter()
            .zip(&dataset.labels)
            .map(|(x, &y)| {
                let trace = ActivationTrace::new(x, weights)?;
                let view = MaskedView::from_evidence(trace.evidence(), weights, window)?;
                Ok(taus
                    .iter()
                    .map(|&tau| ImageVerdict {
                        label_correct: view.clean.label == y,
                        alert: matches!(view.outcome(weights, tau), DetectionOutcome::Alert),
                        certified: view.is_certified(y, weights, tau),
                    })
                    .collect())
            })
            .collect()
    })?;
    let verdicts = verdicts.into_iter().collect::<Result<Vec<_>>>()?;

    let n = dataset.len();
    let rows = taus
        .iter()
        .enumerate()
        .map(|(t, &tau)| {
            let per_image = verdicts.iter().map(|v| v[t]);
            let clean_correct = per_image
                .clone()
                .filter(|v| v.label_correct && !v.alert)
                .count();
            let label_correct = per_image.clone().filter(|v| v.label_correct).count();
            let clean_alerts = per_image.clone().filter(|v| v.alert).count();
            let certified = per_image.filter(|v| v.certified).count();
            TauRow {
                tau,
                images: n,
                clean_correct,
                label_correct,
                clean_alerts,
                certified,
                clean_accuracy: fraction(clean_correct, n),
                clean_accuracy_ignoring_alerts: fraction(label_correct, n),
                robust_accuracy: fraction(certified, n),
            }
        })
        .collect();
    Ok(EvalReport {
        images: n,
        patch,
        mask_window: window,
        rows,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub reports: usize,
    pub certified: usize,
    pub locations: usize,
    pub attempts: usize,
    pub violations: usize,
    pub unguarded_successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEvalReport {
    pub patch: usize,
    pub mask_window: usize,
    pub budget: usize,
    pub seed: u64,
    pub summary: AttackSummary,
    pub reports: Vec<SoundnessReport>,
}

/// Knobs for [`attack_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub patch: PatchSize,
    pub taus: Vec<f32>,
    /// Attempts per location.
    pub budget: usize,
    /// Pixel stride between patch positions; `None` picks one from the image size.
    pub location_stride: Option<usize>,
    pub seed: u64,
    pub workers: usize,
}

impl From<&EvalConfig> for AttackSettings {
    fn from(cfg: &EvalConfig) -> Self {
        AttackSettings {
            patch: cfg.patch,
            taus: cfg.taus.clone(),
            budget: cfg.attack_budget,
            location_stride: cfg.location_stride,
            seed: cfg.seed,
            workers: cfg.workers,
        }
    }
}

/// Pixel and feature sweeps over every image at every tau.
pub fn attack_eval(
    weights: &ModelWeights,
    dataset: &Dataset,
    settings: &AttackSettings,
) -> Result<AttackEvalReport> {
    let AttackSettings {
        patch,
        ref taus,
        budget,
        location_stride,
        seed,
        workers,
    } = *settings;
    if taus.is_empty() {
        return Err(Error::Config("tau list is empty".into()));
    }
    for &t in taus {
        DefenseParams::new(t, 1)?;
    }
    dataset.check(weights)?;
    let (patch, window) = match dataset.images.first() {
        Some(x) => {
            let (h, w, _) = x.dims3()?;
            let p = ThreatModel::resolve(patch, h, w)?.patch;
            (p, mask_window_size(p, &weights.receptive_field()))
        }
        None => (0, 0),
    };
    let per_image: Vec<Result<Vec<SoundnessReport>>> = with_pool(workers, || {
        dataset
            .images
            .par_iter()
            .enumerate()
            .map(|(idx, x)| {
                let (h, w, _) = x.dims3()?;
                let cfg = AttackConfig {
                    patch,
                    budget,
                    location_stride: location_stride
                        .unwrap_or_else(|| default_location_stride(h, w)),
                    seed: stream_seed(seed, idx as u64, 0),
                    feature_region: Default::default(),
                };
                let id = &dataset.ids[idx];
                let y = dataset.labels[idx];
                let mut out = Vec::with_capacity(2 * taus.len());
                for &tau in taus {
                    let params = DefenseParams::new(tau, window)?;
                    out.push(sweep_pixel_attacks(id, x, y, weights, &params, &cfg)?);
                    out.push(sweep_feature_attacks(id, x, y, weights, &params, &cfg)?);
                }
                Ok(out)
            })
            .collect()
    })?;
    let mut reports = Vec::new();
    for r in per_image {
        reports.extend(r?);
    }
    let mut summary = AttackSummary::default();
    for r in &reports {
        summary.reports += 1;
        summary.certified += r.certified as usize;
        summary.locations += r.locations;
        summary.attempts += r.attempts;
        summary.violations += r.violations.len();
        summary.unguarded_successes += r.unguarded_successes;
    }
    Ok(AttackEvalReport {
        patch,
        mask_window: window,
        budget,
        seed,
        summary,
        reports,
    })
}
