//! Attack detection by masked-prediction consensus, and per-image certification.
//!
//! A masked prediction *abstains* when its confidence is at most `tau`; both the
//! detector and the certifier treat `confidence > tau` as non-abstained, so an
//! image whose masked confidence sits exactly on `tau` is not certified.

use serde::{Deserialize, Serialize};

use crate::backbone::{ActivationTrace, ModelWeights, Prediction};
use crate::error::{Error, Result};
use crate::masking::{enumerate_windows, MaskedEvidence, MaskedPredictionRecord, Window};
use crate::rf::{affected_feature_interval, covering_window_start, mask_window_size, CellSpan};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseParams {
    /// Confidence threshold in `[0, 1)`.
    pub tau: f32,
    /// Mask window size in feature cells (clamped to the feature map when used).
    pub window: usize,
}

impl DefenseParams {
    pub fn new(tau: f32, window: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {tau}")));
        }
        if window == 0 {
            return Err(Error::Config("mask window size must be >= 1".into()));
        }
        Ok(DefenseParams { tau, window })
    }

    /// Window size derived from the patch size and the model's receptive field.
    pub fn for_patch(tau: f32, patch: usize, weights: &ModelWeights) -> Result<Self> {
        Self::new(tau, mask_window_size(patch, &weights.receptive_field()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DetectionOutcome {
    Prediction { label: usize },
    Alert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Incorrect,
    Abstained,
}

/// Detection outcome with the unmasked prediction and, in trace mode, every
/// masked prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub outcome: DetectionOutcome,
    pub clean: Prediction,
    /// First window that triggered the alert, if any.
    pub alert_window: Option<Window>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<MaskedPredictionRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub certified: bool,
    pub failing_window: Option<Window>,
    pub failure_kind: Option<FailureKind>,
    /// Every failing window in enumeration order; filled only in exhaustive mode.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failures: Vec<(Window, FailureKind)>,
    pub records: Vec<MaskedPredictionRecord>,
}

/// True when a masked prediction is confident and disagrees with the clean label.
#[inline]
pub fn triggers_alert(masked: &Prediction, clean_label: usize, tau: f32) -> bool {
    masked.confidence > tau && masked.label != clean_label
}

/// Why a masked prediction fails certification for label `y`, if it does.
#[inline]
pub fn certification_failure(masked: &Prediction, y: usize, tau: f32) -> Option<FailureKind> {
    if masked.label != y {
        Some(FailureKind::Incorrect)
    } else if masked.confidence <= tau {
        Some(FailureKind::Abstained)
    } else {
        None
    }
}

/// Everything the defense needs about one image: the unmasked prediction, the
/// masking tables and the window set.
#[derive(Clone, Debug)]
pub struct MaskedView {
    pub clean: Prediction,
    pub evidence: MaskedEvidence,
    pub windows: Vec<Window>,
}

impl MaskedView {
    /// Builds the view from an evidence map `[rows', cols', classes]`.
    pub fn from_evidence(e: &Tensor, weights: &ModelWeights, window: usize) -> Result<Self> {
        let clean = crate::backbone::prediction_from_evidence(e, weights);
        let evidence = MaskedEvidence::new(e)?;
        let windows = enumerate_windows(evidence.rows(), evidence.cols(), window)?;
        Ok(MaskedView {
            clean,
            evidence,
            windows,
        })
    }

    pub fn from_image(x: &Tensor, weights: &ModelWeights, window: usize) -> Result<Self> {
        check_pixels(x)?;
        let trace = ActivationTrace::new(x, weights)?;
        Self::from_evidence(trace.evidence(), weights, window)
    }

    pub fn masked(&self, window: Window, weights: &ModelWeights) -> Prediction {
        self.evidence
            .predict_masked(window, weights.head_bias().data())
    }

    pub fn records(&self, weights: &ModelWeights) -> Vec<MaskedPredictionRecord> {
        crate::masking::masked_predictions_all(
            &self.evidence,
            weights.head_bias().data(),
            &self.windows,
        )
    }

    /// First alerting window in enumeration order.
    pub fn first_alert(&self, weights: &ModelWeights, tau: f32) -> Option<Window> {
        self.windows
            .iter()
            .copied()
            .find(|&w| triggers_alert(&self.masked(w, weights), self.clean.label, tau))
    }

    pub fn outcome(&self, weights: &ModelWeights, tau: f32) -> DetectionOutcome {
        match self.first_alert(weights, tau) {
            Some(_) => DetectionOutcome::Alert,
            None => DetectionOutcome::Prediction {
                label: self.clean.label,
            },
        }
    }

    /// Short-circuiting certification check.
    pub fn is_certified(&self, y: usize, weights: &ModelWeights, tau: f32) -> bool {
        self.windows
            .iter()
            .all(|&w| certification_failure(&self.masked(w, weights), y, tau).is_none())
    }

    pub fn detect_report(&self, weights: &ModelWeights, tau: f32, trace: bool) -> DetectionReport {
        let alert_window = self.first_alert(weights, tau);
        DetectionReport {
            outcome: match alert_window {
                Some(_) => DetectionOutcome::Alert,
                None => DetectionOutcome::Prediction {
                    label: self.clean.label,
                },
            },
            clean: self.clean.clone(),
            alert_window,
            records: trace.then(|| self.records(weights)),
        }
    }

    pub fn certify(
        &self,
        y: usize,
        weights: &ModelWeights,
        tau: f32,
        exhaustive: bool,
    ) -> CertificationResult {
        let records = self.records(weights);
        let mut failures = Vec::new();
        let mut first = None;
        for rec in &records {
            if let Some(kind) = certification_failure(&rec.prediction, y, tau) {
                first.get_or_insert((rec.window, kind));
                if !exhaustive {
                    break;
                }
                failures.push((rec.window, kind));
            }
        }
        CertificationResult {
            certified: first.is_none(),
            failing_window: first.map(|f| f.0),
            failure_kind: first.map(|f| f.1),
            failures,
            records,
        }
    }
}

pub(crate) fn check_pixels(x: &Tensor) -> Result<()> {
    if !x.within(0.0, 1.0) {
        return Err(Error::Validation("image pixels must lie in [0, 1]".into()));
    }
    Ok(())
}

fn check_label(y: usize, weights: &ModelWeights) -> Result<()> {
    if y >= weights.num_classes() {
        return Err(Error::Config(format!(
            "label {y} out of range for {} classes",
            weights.num_classes()
        )));
    }
    Ok(())
}

/// Returns the unmasked label unless some confident masked prediction disagrees.
pub fn detect(
    x: &Tensor,
    weights: &ModelWeights,
    params: &DefenseParams,
) -> Result<DetectionOutcome> {
    Ok(MaskedView::from_image(x, weights, params.window)?.outcome(weights, params.tau))
}

/// [`detect`] with the full window sweep recorded.
pub fn detect_traced(
    x: &Tensor,
    weights: &ModelWeights,
    params: &DefenseParams,
) -> Result<DetectionReport> {
    Ok(MaskedView::from_image(x, weights, params.window)?.detect_report(weights, params.tau, true))
}

/// Certifies `x` for label `y`: every masked prediction must be `y` with confidence above tau.
pub fn certify(
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
) -> Result<CertificationResult> {
    certify_with(x, y, weights, params, false)
}

pub fn certify_with(
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
    exhaustive: bool,
) -> Result<CertificationResult> {
    check_label(y, weights)?;
    Ok(MaskedView::from_image(x, weights, params.window)?
        .certify(y, weights, params.tau, exhaustive))
}

/// For one patch placement: the feature cells it can reach and a mask window
/// that covers all of them, with that window's clean masked prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageWitness {
    pub patch_top: usize,
    pub patch_left: usize,
    pub rows: Option<CellSpan>,
    pub cols: Option<CellSpan>,
    pub window: Window,
    pub prediction: Prediction,
}

/// Covering window for a patch at `(top, left)`.
pub fn covering_window(
    top: usize,
    left: usize,
    patch: usize,
    weights: &ModelWeights,
    image_rows: usize,
    image_cols: usize,
    window: usize,
) -> Result<(Option<CellSpan>, Option<CellSpan>, Window)> {
    let rf = weights.receptive_field();
    let (fr, fc) = weights.feature_extents(image_rows, image_cols)?;
    let rows = affected_feature_interval(top, patch, &rf, fr, image_rows)?;
    let cols = affected_feature_interval(left, patch, &rf, fc, image_cols)?;
    let (height, width) = (window.min(fr), window.min(fc));
    let wtop = covering_window_start(rows, window, fr);
    let wleft = covering_window_start(cols, window, fc);
    match (wtop, wleft) {
        (Some(top), Some(left)) => Ok((
            rows,
            cols,
            Window {
                top,
                left,
                height,
                width,
            },
        )),
        _ => Err(Error::Config(format!(
            "window size {window} cannot cover the cells reached by a {patch}px patch"
        ))),
    }
}

/// Spells out why certification implies alert-or-correct: for every patch
/// placement there is a window masking every feature the patch can reach, and
/// its masked prediction is `y` with confidence above tau on the clean image.
/// Since masked logits ignore the window contents, that prediction survives any
/// patch content, so an attacked image either alerts or keeps label `y`.
///
/// Fails with a contract error unless `x` is certified for `y`.
pub fn soundness_witnesses(
    x: &Tensor,
    y: usize,
    weights: &ModelWeights,
    params: &DefenseParams,
    patch: usize,
) -> Result<Vec<CoverageWitness>> {
    check_label(y, weights)?;
    let view = MaskedView::from_image(x, weights, params.window)?;
    if !view.is_certified(y, weights, params.tau) {
        return Err(Error::Contract(
            "soundness witnesses require a certified image".into(),
        ));
    }
    let (h, w, _) = x.dims3()?;
    if patch == 0 || patch > h.min(w) {
        return Err(Error::Bounds(format!(
            "patch size {patch} does not fit a {h}x{w} image"
        )));
    }
    let mut out = Vec::with_capacity((h - patch + 1) * (w - patch + 1));
    for top in 0..=h - patch {
        for left in 0..=w - patch {
            let (rows, cols, window) =
                covering_window(top, left, patch, weights, h, w, params.window)?;
            let prediction = view.masked(window, weights);
            if certification_failure(&prediction, y, params.tau).is_some() {
                return Err(Error::Contract(format!(
                    "covering window {window:?} fails on a certified image"
                )));
            }
            out.push(CoverageWitness {
                patch_top: top,
                patch_left: left,
                rows,
                cols,
                window,
                prediction,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{evidence_map, extract_features};
    use crate::sat::Rect;
    use crate::toy::{linear_model, random_image, random_model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn win(top: usize, left: usize, size: usize) -> Window {
        Window {
            top,
            left,
            height: size,
            width: size,
        }
    }

    /// Two classes, one strong class-0 cell in a field of weak class-1 cells.
    fn crafted(k: f32) -> (Tensor, ModelWeights) {
        let x = Tensor::from_fn(vec![3, 3, 2], |i| match (i / 2, i % 2) {
            (0, 0) => 1.0,
            (0, 1) => 0.0,
            (_, 0) => 0.0,
            _ => 0.1,
        })
        .unwrap();
        (
            x,
            linear_model(2, vec![k, 0.0, 0.0, k], vec![0.0, 0.0]).unwrap(),
        )
    }

    #[test]
    fn params_validation() {
        assert!(DefenseParams::new(0.5, 3).is_ok());
        assert!(DefenseParams::new(0.0, 1).is_ok());
        assert!(matches!(DefenseParams::new(1.0, 3), Err(Error::Config(_))));
        assert!(matches!(DefenseParams::new(-0.1, 3), Err(Error::Config(_))));
        assert!(matches!(DefenseParams::new(0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn window_from_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(
            &mut rng,
            3,
            &[(3, 1, 2), (3, 2, 2), (3, 2, 2), (3, 2, 2), (3, 1, 2)],
            2,
        )
        .unwrap();
        assert_eq!(DefenseParams::for_patch(0.5, 32, &m).unwrap().window, 8);
    }

    #[test]
    fn zero_features_reach_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 3, &[(3, 1, 4), (3, 2, 4)], 3).unwrap();
        let layers: Vec<_> = m
            .conv_layers()
            .into_iter()
            .map(|(s, w, _)| (s, w.clone(), Tensor::zeros(vec![s.out_channels])))
            .collect();
        let m = ModelWeights::new(
            layers,
            m.head_matrix().clone(),
            Tensor::new(vec![3], vec![0.1, 0.7, 0.2]).unwrap(),
        )
        .unwrap();
        let x = Tensor::zeros(vec![11, 11, 3]);
        let report = detect_traced(&x, &m, &DefenseParams::new(0.2, 2).unwrap()).unwrap();
        assert_eq!(report.outcome, DetectionOutcome::Prediction { label: 1 });
        for rec in report.records.unwrap() {
            assert_eq!(rec.prediction, report.clean);
        }
    }

    #[test]
    fn high_threshold_never_alerts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 3, &[(3, 1, 6), (3, 2, 6)], 4).unwrap();
        let params = DefenseParams::new(0.999, 3).unwrap();
        for _ in 0..20 {
            let x = random_image(&mut rng, 16, 16, 3);
            let clean = predict(&x, &m);
            assert_eq!(
                detect(&x, &m, &params).unwrap(),
                DetectionOutcome::Prediction { label: clean }
            );
        }
    }

    fn predict(x: &Tensor, m: &ModelWeights) -> usize {
        crate::backbone::predict(&extract_features(x, m).unwrap(), m)
            .unwrap()
            .label
    }

    #[test]
    fn crafted_alert() {
        // masking the strong cell leaves logits k/9 * (0, 0.8); k = 9 ln 9 / 0.8 puts
        // the masked confidence at 0.9
        let k = 9.0 * 9f32.ln() / 0.8;
        let (x, m) = crafted(k);
        let params = DefenseParams::new(0.5, 1).unwrap();
        let report = detect_traced(&x, &m, &params).unwrap();
        assert_eq!(report.clean.label, 0);
        assert_eq!(report.outcome, DetectionOutcome::Alert);
        assert_eq!(report.alert_window, Some(win(0, 0, 1)));
        let masked = &report.records.as_ref().unwrap()[0].prediction;
        assert_eq!(masked.label, 1);
        assert!((masked.confidence - 0.9).abs() < 1e-4);

        // the same disagreement below threshold is tolerated
        let quiet = DefenseParams::new(0.95, 1).unwrap();
        assert_eq!(
            detect(&x, &m, &quiet).unwrap(),
            DetectionOutcome::Prediction { label: 0 }
        );
    }

    #[test]
    fn certified_by_confident_bias() {
        // every masked prediction is softmax(ln 4, 0) = (0.8, 0.2)
        let m = linear_model(2, vec![1.0, 0.0, 0.0, 1.0], vec![4f32.ln(), 0.0]).unwrap();
        let x = Tensor::zeros(vec![4, 4, 2]);
        let r = certify(&x, 0, &m, &DefenseParams::new(0.5, 2).unwrap()).unwrap();
        assert!(r.certified);
        assert_eq!(r.records.len(), 9);
        for rec in &r.records {
            assert!((rec.prediction.confidence - 0.8).abs() < 1e-6);
        }

        let r = certify(&x, 1, &m, &DefenseParams::new(0.5, 2).unwrap()).unwrap();
        assert!(!r.certified);
        assert_eq!(r.failing_window, Some(win(0, 0, 2)));
        assert_eq!(r.failure_kind, Some(FailureKind::Incorrect));

        let r = certify(&x, 0, &m, &DefenseParams::new(0.85, 2).unwrap()).unwrap();
        assert_eq!(r.failure_kind, Some(FailureKind::Abstained));
    }

    #[test]
    fn universal_abstention() {
        let m = linear_model(3, vec![0.0; 9], vec![0.0; 3]).unwrap();
        let x = Tensor::zeros(vec![5, 5, 3]);
        let params = DefenseParams::new(0.5, 2).unwrap();
        assert_eq!(
            detect(&x, &m, &params).unwrap(),
            DetectionOutcome::Prediction { label: 0 }
        );
        let r = certify_with(&x, 0, &m, &params, true).unwrap();
        assert!(!r.certified);
        assert_eq!(r.failure_kind, Some(FailureKind::Abstained));
        assert_eq!(r.failures.len(), 16);
        assert!(r.failures.iter().all(|f| f.1 == FailureKind::Abstained));
    }

    #[test]
    fn confidence_equal_to_tau_abstains() {
        let m = linear_model(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let x = Tensor::zeros(vec![3, 3, 2]);
        let params = DefenseParams::new(0.5, 1).unwrap();
        let r = certify(&x, 0, &m, &params).unwrap();
        assert_eq!(r.records[0].prediction.confidence, 0.5);
        assert!(!r.certified);
        assert_eq!(r.failure_kind, Some(FailureKind::Abstained));
        assert_eq!(
            detect(&x, &m, &params).unwrap(),
            DetectionOutcome::Prediction { label: 0 }
        );
    }

    #[test]
    fn incorrect_takes_precedence_over_abstained() {
        let p = Prediction::from_logits(vec![0.0, 0.1]);
        assert_eq!(
            certification_failure(&p, 0, 0.9),
            Some(FailureKind::Incorrect)
        );
        assert_eq!(
            certification_failure(&p, 1, 0.9),
            Some(FailureKind::Abstained)
        );
        assert_eq!(certification_failure(&p, 1, 0.5), None);
        assert!(triggers_alert(&p, 0, 0.5));
        assert!(!triggers_alert(&p, 0, 0.9));
        assert!(!triggers_alert(&p, 1, 0.0));
    }

    #[test]
    fn certification_respects_clean_consistency_loosely() {
        // certified images detect to y or alert; never to another label
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let m = random_model(&mut rng, 3, &[(3, 1, 6), (3, 2, 6)], 3).unwrap();
            let y = rng.gen_range(0..3);
            let mut b = vec![0.0; 3];
            b[y] = rng.gen_range(0.0..2.0);
            let m = m.with_head_bias(b).unwrap();
            let x = random_image(&mut rng, 16, 16, 3);
            let params = DefenseParams::new(0.5, 3).unwrap();
            if certify(&x, y, &m, &params).unwrap().certified {
                let out = detect(&x, &m, &params).unwrap();
                assert!(
                    matches!(out, DetectionOutcome::Alert)
                        || out == DetectionOutcome::Prediction { label: y }
                );
            }
        }
    }

    #[test]
    fn certified_image_can_alert_on_itself() {
        // Each cell carries one unit of class-1 evidence and the bias favours
        // class 0 by 0.6. Masking either cell of the 1x2 map leaves logits
        // (0.6, 0.5), so every masked view says 0 above tau; the unmasked logits
        // are (0.6, 1.0), so the image is certified for 0 yet detection alerts.
        let m = linear_model(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.6, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let params = DefenseParams::new(0.5, 1).unwrap();
        let r = certify(&x, 0, &m, &params).unwrap();
        assert!(r.certified);
        let report = detect_traced(&x, &m, &params).unwrap();
        assert_eq!(report.clean.label, 1);
        assert_eq!(report.outcome, DetectionOutcome::Alert);
    }

    #[test]
    fn input_checks() {
        let m = linear_model(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let params = DefenseParams::new(0.5, 1).unwrap();
        let mut bad = vec![0.0; 8];
        bad[3] = 1.5;
        let x = Tensor::new(vec![2, 2, 2], bad).unwrap();
        assert!(matches!(detect(&x, &m, &params), Err(Error::Validation(_))));
        let x = Tensor::zeros(vec![2, 2, 2]);
        assert!(matches!(certify(&x, 2, &m, &params), Err(Error::Config(_))));
        assert!(matches!(
            detect(&Tensor::zeros(vec![2, 2, 3]), &m, &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn witnesses_hold_against_feature_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3, &[(3, 1, 6), (3, 2, 8)], 4).unwrap();
        let m = m.with_head_bias(vec![0.0, 0.0, 4.0, 0.0]).unwrap();
        let x = random_image(&mut rng, 32, 32, 3);
        let patch = 4;
        let params = DefenseParams::for_patch(0.5, patch, &m).unwrap();
        assert_eq!(params.window, 4);
        let witnesses = soundness_witnesses(&x, 2, &m, &params, patch).unwrap();
        assert_eq!(witnesses.len(), 29 * 29);
        let u = extract_features(&x, &m).unwrap();
        let (fr, fc, ch) = u.dims3().unwrap();
        for wit in &witnesses {
            let (rows, cols) = (wit.rows.unwrap(), wit.cols.unwrap());
            assert!(wit.window.rect().contains(&Rect::new(
                rows.lo,
                cols.lo,
                rows.count(),
                cols.count()
            )));
            for _ in 0..10 {
                let mut data = u.data().to_vec();
                for i in rows.lo..=rows.hi {
                    for j in cols.lo..=cols.hi {
                        for k in 0..ch {
                            data[(i * fc + j) * ch + k] = rng.gen_range(-1e4..1e4);
                        }
                    }
                }
                let corrupted = Tensor::new(vec![fr, fc, ch], data).unwrap();
                let ev = MaskedEvidence::new(&evidence_map(&corrupted, &m).unwrap()).unwrap();
                let p = ev.predict_masked(wit.window, m.head_bias().data());
                assert_eq!(p, wit.prediction);
            }
        }
    }

    #[test]
    fn witnesses_require_certification() {
        let m = linear_model(3, vec![0.0; 9], vec![0.0; 3]).unwrap();
        let x = Tensor::zeros(vec![6, 6, 3]);
        let params = DefenseParams::new(0.5, 2).unwrap();
        assert!(matches!(
            soundness_witnesses(&x, 0, &m, &params, 2),
            Err(Error::Contract(_))
        ));
    }
}
