//! Forward-only small-receptive-field CNN: valid convolutions with ReLU,
//! followed by a global-average-pool + linear head.
//!
//! Because the head is linear, the logits are the mean of per-cell class
//! evidence plus the head bias. Masking a set of cells therefore only removes
//! their evidence from the sum, which is what the masking engine exploits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{load_tensor, save_tensor};
use crate::rf::{compose_receptive_field, ConvLayerSpec, ReceptiveField};
use crate::sat::Rect;
use crate::tensor::Tensor;

/// Shape of one convolution layer as recorded in a bundle manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerShape {
    pub fn conv_spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

/// `manifest.json` of a weight bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerShape>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    shape: LayerShape,
    weight: Tensor,
    bias: Tensor,
    /// Weights reordered to `[out][ky][kx * in + c]` so each kernel row is a
    /// contiguous dot product against the input row.
    packed: Vec<f32>,
}

impl ConvLayer {
    fn new(shape: LayerShape, weight: Tensor, bias: Tensor) -> Result<Self> {
        shape.conv_spec().validate()?;
        let LayerShape {
            kernel: k,
            in_channels: cin,
            out_channels: cout,
            ..
        } = shape;
        if weight.shape() != [cout, cin, k, k] {
            return Err(Error::Shape(format!(
                "conv weight shape {:?} does not match {shape:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        let w = weight.data();
        let mut packed = vec![0.0; cout * k * k * cin];
        for o in 0..cout {
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        packed[((o * k + ky) * k + kx) * cin + c] =
                            w[((o * cin + c) * k + ky) * k + kx];
                    }
                }
            }
        }
        Ok(ConvLayer {
            shape,
            weight,
            bias,
            packed,
        })
    }

    /// Computes every output channel of cell `(oi, oj)`, ReLU included.
    #[inline]
    fn cell(&self, input: &[f32], in_cols: usize, oi: usize, oj: usize, out: &mut [f32]) {
        let LayerShape {
            kernel: k,
            stride: s,
            in_channels: cin,
            ..
        } = self.shape;
        let row_len = k * cin;
        let bias = self.bias.data();
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = bias[o];
            for ky in 0..k {
                let start = ((oi * s + ky) * in_cols + oj * s) * cin;
                let x = &input[start..start + row_len];
                let w = &self.packed[(o * k + ky) * row_len..][..row_len];
                acc += x.iter().zip(w).map(|(a, b)| a * b).sum::<f32>();
            }
            *slot = acc.max(0.0);
        }
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (h, w, c) = input.dims3()?;
        if c != self.shape.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {c}",
                self.shape.in_channels
            )));
        }
        let spec = self.shape.conv_spec();
        let (oh, ow) = (spec.output_extent(h)?, spec.output_extent(w)?);
        let cout = self.shape.out_channels;
        let mut out = vec![0.0f32; oh * ow * cout];
        for oi in 0..oh {
            for oj in 0..ow {
                let base = (oi * ow + oj) * cout;
                self.cell(input.data(), w, oi, oj, &mut out[base..base + cout]);
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![oh, ow, cout], out))
    }
}

/// Convolution stack plus linear head.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    in_channels: usize,
    layers: Vec<ConvLayer>,
    head_a: Tensor,
    head_b: Tensor,
}

impl ModelWeights {
    /// Assembles a model from `(shape, kernel [out,in,k,k], bias [out])` triples and a
    /// head `A: [classes, C']`, `b: [classes]`.
    pub fn new(
        layers: Vec<(LayerShape, Tensor, Tensor)>,
        head_a: Tensor,
        head_b: Tensor,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("backbone has no layers".into()))?;
        let in_channels = first.0.in_channels;
        let mut prev_out = in_channels;
        let mut built = Vec::with_capacity(layers.len());
        for (idx, (shape, w, b)) in layers.into_iter().enumerate() {
            if shape.in_channels != prev_out {
                return Err(Error::Shape(format!(
                    "layer {idx} expects {} input channels but the previous layer emits {prev_out}",
                    shape.in_channels
                )));
            }
            prev_out = shape.out_channels;
            built.push(ConvLayer::new(shape, w, b)?);
        }
        match head_a.shape() {
            [n, c] if *c == prev_out && *n > 0 => {
                if head_b.shape() != [*n] {
                    return Err(Error::Shape(format!(
                        "head bias shape {:?} does not match {n} classes",
                        head_b.shape()
                    )));
                }
            }
            other => {
                return Err(Error::Shape(format!(
                    "head matrix shape {other:?} must be [classes, {prev_out}]"
                )))
            }
        }
        Ok(ModelWeights {
            in_channels,
            layers: built,
            head_a,
            head_b,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.head_a.shape()[1]
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }

    /// `(shape, kernel [out,in,k,k], bias [out])` per layer.
    pub fn conv_layers(&self) -> Vec<(LayerShape, &Tensor, &Tensor)> {
        self.layers
            .iter()
            .map(|l| (l.shape, &l.weight, &l.bias))
            .collect()
    }

    pub fn conv_specs(&self) -> Vec<ConvLayerSpec> {
        self.layers.iter().map(|l| l.shape.conv_spec()).collect()
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        compose_receptive_field(&self.conv_specs()).expect("validated at construction")
    }

    /// Feature map extents for an image of `rows x cols` pixels.
    pub fn feature_extents(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let specs = self.conv_specs();
        Ok((
            crate::rf::feature_extent(&specs, rows)?,
            crate::rf::feature_extent(&specs, cols)?,
        ))
    }

    pub fn head_matrix(&self) -> &Tensor {
        &self.head_a
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_b
    }

    /// Returns a copy with a different head bias.
    pub fn with_head_bias(&self, bias: Vec<f32>) -> Result<Self> {
        let head_b = Tensor::new(vec![bias.len()], bias)?;
        if head_b.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "head bias must have {} entries",
                self.num_classes()
            )));
        }
        Ok(ModelWeights {
            head_b,
            ..self.clone()
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            layers: self.layer_shapes(),
            num_classes: self.num_classes(),
            metadata: None,
        }
    }

    /// Loads a bundle directory: `manifest.json`, `conv{i}_w.npy`, `conv{i}_b.npy`,
    /// `head_A.npy`, `head_b.npy` with `i` counting from zero.
    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (i, shape) in manifest.layers.iter().enumerate() {
            let w = load_tensor(dir.join(format!("conv{i}_w.npy")))?;
            let b = load_tensor(dir.join(format!("conv{i}_b.npy")))?;
            layers.push((*shape, w, b));
        }
        let head_a = load_tensor(dir.join("head_A.npy"))?;
        let head_b = load_tensor(dir.join("head_b.npy"))?;
        let model = ModelWeights::new(layers, head_a, head_b)?;
        if model.num_classes() != manifest.num_classes {
            return Err(Error::Shape(format!(
                "manifest declares {} classes, head has {}",
                manifest.num_classes,
                model.num_classes()
            )));
        }
        Ok(model)
    }

    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, layer) in self.layers.iter().enumerate() {
            save_tensor(dir.join(format!("conv{i}_w.npy")), &layer.weight)?;
            save_tensor(dir.join(format!("conv{i}_b.npy")), &layer.bias)?;
        }
        save_tensor(dir.join("head_A.npy"), &self.head_a)?;
        save_tensor(dir.join("head_b.npy"), &self.head_b)?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Label, top softmax probability and raw logits of a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f32,
    pub logits: Vec<f32>,
}

impl Prediction {
    /// Argmax with lowest-index tie-break; confidence is the max softmax entry.
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let mut label = 0;
        for (k, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[label] {
                label = k;
            }
        }
        let max = logits[label] as f64;
        let denom: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
        Prediction {
            label,
            confidence: (1.0 / denom) as f32,
            logits,
        }
    }

    pub fn softmax(&self) -> Vec<f64> {
        let max = self.logits[self.label] as f64;
        let exps: Vec<f64> = self
            .logits
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Logits from per-class evidence sums: `sum / cells + bias`.
#[inline]
pub(crate) fn logits_from_sums(sums: &[f64], cells: usize, bias: &[f32]) -> Vec<f32> {
    sums.iter()
        .zip(bias)
        .map(|(s, b)| (s / cells as f64 + *b as f64) as f32)
        .collect()
}

fn check_image(x: &Tensor, weights: &ModelWeights) -> Result<()> {
    let (h, w, c) = x.dims3()?;
    if c != weights.in_channels {
        return Err(Error::Shape(format!(
            "image has {c} channels, model expects {}",
            weights.in_channels
        )));
    }
    let rf = weights.receptive_field();
    if h < rf.size || w < rf.size {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the receptive field {}",
            rf.size
        )));
    }
    Ok(())
}

/// Runs the convolution stack, returning the `[rows', cols', C']` feature map.
pub fn extract_features(x: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    check_image(x, weights)?;
    let mut current = weights.layers[0].forward(x)?;
    for layer in &weights.layers[1..] {
        current = layer.forward(&current)?;
    }
    Ok(current)
}

#[inline]
fn cell_evidence(head: &[f32], channels: usize, features: &[f32], out: &mut [f32]) {
    for (k, slot) in out.iter_mut().enumerate() {
        let row = &head[k * channels..][..channels];
        *slot = row.iter().zip(features).map(|(a, u)| a * u).sum();
    }
}

/// Per-cell class evidence `e[i,j,k] = sum_c A[k,c] u[i,j,c]`, without the head bias.
pub fn evidence_map(u: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let (h, w, c) = u.dims3()?;
    if c != weights.feature_channels() {
        return Err(Error::Shape(format!(
            "feature map has {c} channels, head expects {}",
            weights.feature_channels()
        )));
    }
    let n = weights.num_classes();
    let head = weights.head_a.data();
    let mut out = vec![0.0f32; h * w * n];
    for (cell, features) in u.data().chunks_exact(c).enumerate() {
        cell_evidence(head, c, features, &mut out[cell * n..(cell + 1) * n]);
    }
    let e = Tensor::new(vec![h, w, n], out)?;
    Ok(e)
}

/// Recomputes the evidence of the cells in `rect` from `u`.
pub(crate) fn refresh_evidence(e: &mut Tensor, u: &Tensor, rect: Rect, weights: &ModelWeights) {
    let (_, cols, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = weights.num_classes();
    let head = weights.head_a.data();
    let out = e.data_mut_unchecked();
    for i in rect.top..rect.bottom() {
        for j in rect.left..rect.right() {
            let cell = i * cols + j;
            cell_evidence(
                head,
                c,
                &u.data()[cell * c..(cell + 1) * c],
                &mut out[cell * n..(cell + 1) * n],
            );
        }
    }
}

/// Sums evidence over all cells in row-major order.
pub(crate) fn evidence_sums(e: &Tensor) -> Vec<f64> {
    let n = *e.shape().last().expect("rank-3 evidence");
    let mut sums = vec![0.0f64; n];
    for cell in e.data().chunks_exact(n) {
        for (s, v) in sums.iter_mut().zip(cell) {
            *s += *v as f64;
        }
    }
    sums
}

/// Full prediction from a feature map: mean evidence over all cells plus head bias.
pub fn predict(u: &Tensor, weights: &ModelWeights) -> Result<Prediction> {
    let (h, w, _) = u.dims3()?;
    if h * w == 0 {
        return Err(Error::Shape("feature map has no cells".into()));
    }
    let e = evidence_map(u, weights)?;
    Ok(prediction_from_evidence(&e, weights))
}

pub(crate) fn prediction_from_evidence(e: &Tensor, weights: &ModelWeights) -> Prediction {
    let cells = e.shape()[0] * e.shape()[1];
    Prediction::from_logits(logits_from_sums(
        &evidence_sums(e),
        cells,
        weights.head_b.data(),
    ))
}

/// Cached activations of one image, used to re-run the network after a local edit.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    input_shape: Vec<usize>,
    /// Output of every layer; the last one is the feature map.
    activations: Vec<Tensor>,
    evidence: Tensor,
}

/// Features and evidence of an edited image, plus the feature cells that changed.
#[derive(Clone, Debug)]
pub struct LocalRerun {
    pub features: Tensor,
    pub evidence: Tensor,
    /// Feature cells that were recomputed; `None` if the edit reaches no cell.
    pub touched: Option<Rect>,
}

impl ActivationTrace {
    pub fn new(x: &Tensor, weights: &ModelWeights) -> Result<Self> {
        check_image(x, weights)?;
        let mut activations: Vec<Tensor> = Vec::with_capacity(weights.layers.len());
        for layer in &weights.layers {
            let next = layer.forward(activations.last().unwrap_or(x))?;
            activations.push(next);
        }
        let evidence = evidence_map(activations.last().expect("non-empty"), weights)?;
        Ok(ActivationTrace {
            input_shape: x.shape().to_vec(),
            activations,
            evidence,
        })
    }

    pub fn features(&self) -> &Tensor {
        self.activations.last().expect("non-empty")
    }

    pub fn evidence(&self) -> &Tensor {
        &self.evidence
    }

    /// Re-runs the network on `edited`, an image equal to the traced one outside
    /// the pixel rect `changed`. Only cells whose receptive field meets `changed`
    /// are recomputed, with the same arithmetic as a full pass, so the result is
    /// bit-identical to [`extract_features`] + [`evidence_map`].
    pub fn rerun_local(
        &self,
        edited: &Tensor,
        changed: Rect,
        weights: &ModelWeights,
    ) -> Result<LocalRerun> {
        if edited.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "edited image shape {:?} differs from the traced image {:?}",
                edited.shape(),
                self.input_shape
            )));
        }
        let mut region = (changed.area() > 0).then_some(changed);
        let mut prev: Option<Tensor> = None;
        for (layer, cached) in weights.layers.iter().zip(&self.activations) {
            let input = prev.as_ref().unwrap_or(edited);
            let (ih, iw, _) = input.dims3()?;
            let (oh, ow, cout) = cached.dims3()?;
            region = region.and_then(|r| {
                let rows = local_span(r.top, r.height, &layer.shape, oh, ih)?;
                let cols = local_span(r.left, r.width, &layer.shape, ow, iw)?;
                Some(Rect::new(
                    rows.0,
                    cols.0,
                    rows.1 - rows.0 + 1,
                    cols.1 - cols.0 + 1,
                ))
            });
            let mut next = cached.clone();
            if let Some(r) = region {
                let out = next.data_mut_unchecked();
                for oi in r.top..r.bottom() {
                    for oj in r.left..r.right() {
                        let base = (oi * ow + oj) * cout;
                        layer.cell(input.data(), iw, oi, oj, &mut out[base..base + cout]);
                    }
                }
            }
            prev = Some(next);
        }
        let features = prev.expect("non-empty");
        let mut evidence = self.evidence.clone();
        if let Some(r) = region {
            refresh_evidence(&mut evidence, &features, r, weights);
        }
        Ok(LocalRerun {
            features,
            evidence,
            touched: region,
        })
    }
}

/// Output cells `[lo, hi]` of a layer whose kernel window meets input `[start, start+len)`.
fn local_span(
    start: usize,
    len: usize,
    shape: &LayerShape,
    out_extent: usize,
    in_extent: usize,
) -> Option<(usize, usize)> {
    let rf = ReceptiveField {
        size: shape.kernel,
        stride: shape.stride,
        offset: 0,
    };
    if len == 0 {
        return None;
    }
    crate::rf::affected_feature_interval(start, len, &rf, out_extent, in_extent)
        .ok()
        .flatten()
        .map(|s| (s.lo, s.hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{identity_layer, random_image, random_model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution from the `[out, in, k, k]` kernel layout, in f64.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
        let (h, wd, cin) = x.dims3().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
        let mut out = vec![0.0; oh * ow * cout];
        for oi in 0..oh {
            for oj in 0..ow {
                for o in 0..cout {
                    let mut acc = b.data()[o] as f64;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += w.data()[((o * cin + c) * k + ky) * k + kx] as f64
                                    * x.at3(oi * stride + ky, oj * stride + kx, c) as f64;
                            }
                        }
                    }
                    out[(oi * ow + oj) * cout + o] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn head_only(channels: usize, a: Vec<f32>, b: Vec<f32>) -> ModelWeights {
        let classes = b.len();
        ModelWeights::new(
            vec![identity_layer(channels).unwrap()],
            Tensor::new(vec![classes, channels], a).unwrap(),
            Tensor::new(vec![classes], b).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 3, &[(3, 1, 4), (3, 2, 5)], 3).unwrap();
        let layers = m
            .layers
            .iter()
            .map(|l| {
                (
                    l.shape,
                    l.weight.clone(),
                    Tensor::zeros(vec![l.shape.out_channels]),
                )
            })
            .collect();
        let m = ModelWeights::new(layers, m.head_a.clone(), m.head_b.clone()).unwrap();
        let u = extract_features(&Tensor::zeros(vec![9, 9, 3]), &m).unwrap();
        assert_eq!(u.shape(), &[3, 3, 5]);
        assert!(u.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_image_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = head_only(3, vec![0.0; 6], vec![0.0; 2]);
        let x = random_image(&mut rng, 5, 4, 3);
        assert_eq!(extract_features(&x, &m).unwrap(), x);
    }

    #[test]
    fn two_layer_net_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let m = random_model(&mut rng, 3, &[(3, 1, 6), (3, 2, 4)], 4).unwrap();
            let x = random_image(&mut rng, 16, 16, 3);
            let l0 = &m.layers[0];
            let l1 = &m.layers[1];
            let mid = conv_oracle(&x, &l0.weight, &l0.bias, 1);
            let mid =
                Tensor::new(vec![14, 14, 6], mid.iter().map(|v| *v as f32).collect()).unwrap();
            let want = conv_oracle(&mid, &l1.weight, &l1.bias, 2);
            let got = extract_features(&x, &m).unwrap();
            assert_eq!(got.shape(), &[6, 6, 4]);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-4, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn image_smaller_than_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 3, &[(3, 1, 2), (3, 2, 2)], 2).unwrap();
        assert_eq!(m.receptive_field().size, 5);
        assert!(matches!(
            extract_features(&Tensor::zeros(vec![4, 8, 3]), &m),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            extract_features(&Tensor::zeros(vec![8, 8, 2]), &m),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn evidence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = head_only(4, a.clone(), vec![0.0; 3]);
        let zero = evidence_map(&Tensor::zeros(vec![2, 3, 4]), &m).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        let eye = head_only(
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0; 3],
        );
        let u = random_image(&mut rng, 3, 2, 3);
        assert_eq!(evidence_map(&u, &eye).unwrap(), u);

        let u = Tensor::from_fn(vec![5, 4, 4], |_| rng.gen_range(0.0..3.0)).unwrap();
        let e = evidence_map(&u, &m).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                for k in 0..3 {
                    let want: f64 = (0..4)
                        .map(|c| a[k * 4 + c] as f64 * u.at3(i, j, c) as f64)
                        .sum();
                    assert!((e.at3(i, j, k) as f64 - want).abs() <= 1e-5);
                }
            }
        }
        assert!(matches!(
            evidence_map(&Tensor::zeros(vec![2, 2, 3]), &m),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn evidence_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = head_only(5, a, vec![0.0; 3]);
        for _ in 0..20 {
            let u1 = Tensor::from_fn(vec![4, 4, 5], |_| rng.gen_range(-2.0..2.0)).unwrap();
            let u2 = Tensor::from_fn(vec![4, 4, 5], |_| rng.gen_range(-2.0..2.0)).unwrap();
            let (alpha, beta) = (rng.gen_range(-3.0f32..3.0), rng.gen_range(-3.0f32..3.0));
            let mix = Tensor::new(
                vec![4, 4, 5],
                u1.data()
                    .iter()
                    .zip(u2.data())
                    .map(|(a, b)| alpha * a + beta * b)
                    .collect(),
            )
            .unwrap();
            let (e1, e2, em) = (
                evidence_map(&u1, &m).unwrap(),
                evidence_map(&u2, &m).unwrap(),
                evidence_map(&mix, &m).unwrap(),
            );
            for ((x, y), z) in e1.data().iter().zip(e2.data()).zip(em.data()) {
                assert!((alpha * x + beta * y - z).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn predict_with_bias_only() {
        let m = head_only(2, vec![0.5; 6], vec![2.0, 0.0, 0.0]);
        let p = predict(&Tensor::zeros(vec![3, 3, 2]), &m).unwrap();
        assert_eq!(p.label, 0);
        assert_eq!(p.logits, vec![2.0, 0.0, 0.0]);
        let e2 = (2.0f64).exp();
        assert!((p.confidence as f64 - e2 / (e2 + 2.0)).abs() < 1e-6);
        assert!((p.confidence - 0.7870).abs() < 1e-4);
        let total: f64 = p.softmax().iter().sum();
        assert!((total - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let p = Prediction::from_logits(vec![1.0, 1.0]);
        assert_eq!(p.label, 0);
        assert_eq!(p.confidence, 0.5);
        let p = Prediction::from_logits(vec![0.0, 3.0, 3.0]);
        assert_eq!(p.label, 1);
    }

    #[test]
    fn predict_equals_pool_then_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (c, n) = (rng.gen_range(1..6), rng.gen_range(2..6));
            let a: Vec<f32> = (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = head_only(c, a.clone(), b.clone());
            let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
            let u = Tensor::from_fn(vec![h, w, c], |_| rng.gen_range(0.0..2.0)).unwrap();
            let mut pooled = vec![0.0f64; c];
            for cell in u.data().chunks(c) {
                for (p, v) in pooled.iter_mut().zip(cell) {
                    *p += *v as f64 / (h * w) as f64;
                }
            }
            let p = predict(&u, &m).unwrap();
            for k in 0..n {
                let want: f64 =
                    b[k] as f64 + (0..c).map(|i| a[k * c + i] as f64 * pooled[i]).sum::<f64>();
                assert!((p.logits[k] as f64 - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn uniform_bias_shift_keeps_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, 3, &[(3, 1, 4)], 5).unwrap();
        let m = m.with_head_bias(vec![0.3, -0.2, 0.1, 0.0, 0.5]).unwrap();
        let shifted = m.with_head_bias(vec![1.3, 0.8, 1.1, 1.0, 1.5]).unwrap();
        for _ in 0..10 {
            let u = extract_features(&random_image(&mut rng, 8, 8, 3), &m).unwrap();
            let (p, q) = (predict(&u, &m).unwrap(), predict(&u, &shifted).unwrap());
            assert_eq!(p.label, q.label);
            assert!((p.confidence - q.confidence).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_pixel_change_stays_in_receptive_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 3, &[(3, 1, 4), (3, 2, 4), (2, 1, 3)], 3).unwrap();
        let rf = m.receptive_field();
        let x = random_image(&mut rng, 20, 18, 3);
        let u = extract_features(&x, &m).unwrap();
        let (fh, fw, fc) = u.dims3().unwrap();
        for _ in 0..30 {
            let (pi, pj) = (rng.gen_range(0..20), rng.gen_range(0..18));
            let mut data = x.data().to_vec();
            for k in 0..3 {
                data[(pi * 18 + pj) * 3 + k] = rng.gen();
            }
            let u2 = extract_features(&Tensor::new(vec![20, 18, 3], data).unwrap(), &m).unwrap();
            for i in 0..fh {
                for j in 0..fw {
                    let inside = (rf.cell_start(i)..rf.cell_start(i) + rf.size).contains(&pi)
                        && (rf.cell_start(j)..rf.cell_start(j) + rf.size).contains(&pj);
                    if !inside {
                        for k in 0..fc {
                            assert_eq!(u.at3(i, j, k).to_bits(), u2.at3(i, j, k).to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn local_rerun_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_model(&mut rng, 3, &[(3, 1, 5), (3, 2, 6), (3, 1, 4)], 4).unwrap();
        let x = random_image(&mut rng, 24, 21, 3);
        let trace = ActivationTrace::new(&x, &m).unwrap();
        assert_eq!(trace.features(), &extract_features(&x, &m).unwrap());
        for _ in 0..40 {
            let p = rng.gen_range(1..6);
            let (top, left) = (rng.gen_range(0..=24 - p), rng.gen_range(0..=21 - p));
            let mut data = x.data().to_vec();
            for i in top..top + p {
                for j in left..left + p {
                    for k in 0..3 {
                        data[(i * 21 + j) * 3 + k] = rng.gen();
                    }
                }
            }
            let edited = Tensor::new(vec![24, 21, 3], data).unwrap();
            let rerun = trace
                .rerun_local(&edited, Rect::new(top, left, p, p), &m)
                .unwrap();
            let full = extract_features(&edited, &m).unwrap();
            assert_eq!(rerun.features, full);
            assert_eq!(rerun.evidence, evidence_map(&full, &m).unwrap());
        }
    }

    #[test]
    fn layer_chain_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_model(&mut rng, 3, &[(3, 1, 4), (3, 1, 5)], 2).unwrap();
        let mut layers: Vec<_> = m
            .layers
            .iter()
            .map(|l| (l.shape, l.weight.clone(), l.bias.clone()))
            .collect();
        layers.swap(0, 1);
        assert!(ModelWeights::new(layers, m.head_a.clone(), m.head_b.clone()).is_err());
        let first = m.layers[0].clone();
        assert!(ModelWeights::new(
            vec![(first.shape, first.weight, first.bias)],
            m.head_a.clone(),
            m.head_b.clone()
        )
        .is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_model(&mut rng, 3, &[(3, 1, 4), (3, 2, 5)], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save_bundle(dir.path()).unwrap();
        let back = ModelWeights::load_bundle(dir.path()).unwrap();
        assert_eq!(back.layer_shapes(), m.layer_shapes());
        assert_eq!(back.head_matrix(), m.head_matrix());
        let x = random_image(&mut rng, 10, 10, 3);
        assert_eq!(
            extract_features(&x, &back).unwrap(),
            extract_features(&x, &m).unwrap()
        );
        // mismatched manifest
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            text.replace("\"num_classes\": 3", "\"num_classes\": 4"),
        )
        .unwrap();
        assert!(ModelWeights::load_bundle(dir.path()).is_err());
    }
}
