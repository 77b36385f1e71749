//! Random models, images and datasets at desk scale.

use rand::Rng;

use crate::backbone::{LayerShape, ModelWeights};
use crate::error::Result;
use crate::tensor::Tensor;

/// `(kernel, stride, out_channels)` per layer.
pub type LayerPlan = [(usize, usize, usize)];

/// Random-weight model. Conv kernels are uniform with fan-in scaling, conv
/// biases are small and positive so ReLUs stay active, the head is uniform in
/// `[-1, 1] / sqrt(C')` and its bias is zero.
pub fn random_model<R: Rng>(
    rng: &mut R,
    in_channels: usize,
    plan: &LayerPlan,
    classes: usize,
) -> Result<ModelWeights> {
    let mut layers = Vec::with_capacity(plan.len());
    let mut cin = in_channels;
    for &(kernel, stride, cout) in plan {
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(vec![cout, cin, kernel, kernel], |_| {
            rng.gen_range(-bound..bound)
        })?;
        let b = Tensor::from_fn(vec![cout], |_| rng.gen_range(0.0..0.1))?;
        layers.push((
            LayerShape {
                kernel,
                stride,
                in_channels: cin,
                out_channels: cout,
            },
            w,
            b,
        ));
        cin = cout;
    }
    let scale = 1.0 / (cin as f32).sqrt();
    let head_a = Tensor::from_fn(vec![classes, cin], |_| rng.gen_range(-scale..scale))?;
    ModelWeights::new(layers, head_a, Tensor::zeros(vec![classes]))
}

/// Uniform `[0, 1]` image of `rows x cols x channels`.
pub fn random_image<R: Rng>(rng: &mut R, rows: usize, cols: usize, channels: usize) -> Tensor {
    Tensor::from_fn(vec![rows, cols, channels], |_| rng.gen::<f32>()).expect("finite")
}

/// Smooth image: a random base colour plus low-amplitude noise, in `[0, 1]`.
pub fn smooth_image<R: Rng>(rng: &mut R, rows: usize, cols: usize, channels: usize) -> Tensor {
    let base: Vec<f32> = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
    Tensor::from_fn(vec![rows, cols, channels], |i| {
        (base[i % channels] + rng.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0)
    })
    .expect("finite")
}

/// Identity 1x1 convolution over `channels` channels with a zero bias.
pub fn identity_layer(channels: usize) -> Result<(LayerShape, Tensor, Tensor)> {
    let w = Tensor::from_fn(vec![channels, channels, 1, 1], |i| {
        if i / channels == i % channels {
            1.0
        } else {
            0.0
        }
    })?;
    Ok((
        LayerShape {
            kernel: 1,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
        },
        w,
        Tensor::zeros(vec![channels]),
    ))
}

/// Identity 1x1 backbone with the given head, so images double as feature maps.
/// `head_a` is `[classes, channels]` row-major.
pub fn linear_model(channels: usize, head_a: Vec<f32>, head_b: Vec<f32>) -> Result<ModelWeights> {
    let classes = head_b.len();
    ModelWeights::new(
        vec![identity_layer(channels)?],
        Tensor::new(vec![classes, channels], head_a)?,
        Tensor::new(vec![classes], head_b)?,
    )
}
