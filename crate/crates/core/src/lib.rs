//! Certified detection of adversarial patches.
//!
//! A small-receptive-field CNN bounds how many feature cells a square patch can
//! corrupt. The defense masks every window of that size in feature space and
//! raises an alert when a confident masked prediction disagrees with the
//! unmasked one. An image is certified when every masked prediction is correct
//! and confident: for such an image any patch either triggers an alert or leaves
//! the label unchanged.
//!
//! Module map:
//!
//! * [`tensor`], [`npy`], [`sat`]: storage, file format and prefix sums.
//! * [`rf`]: receptive-field arithmetic and mask sizing.
//! * [`backbone`]: forward pass and GAP + linear head.
//! * [`masking`]: window enumeration and masked predictions.
//! * [`defense`]: detection and certification.
//! * [`attack`]: pixel and feature adversaries used to test certificates.
//! * [`eval`]: datasets, configs, and the batch reports behind the CLI.
//! * [`toy`]: random models and images for tests and demos.

pub mod attack;
pub mod backbone;
pub mod defense;
pub mod error;
pub mod eval;
pub mod masking;
pub mod npy;
pub mod rf;
pub mod sat;
pub mod tensor;
pub mod toy;

pub use backbone::{evidence_map, extract_features, predict, ModelWeights, Prediction};
pub use defense::{certify, detect, CertificationResult, DefenseParams, DetectionOutcome};
pub use error::{Error, Result};
pub use masking::{enumerate_windows, masked_prediction_naive, masked_predictions_all, Window};
pub use npy::{load_tensor, save_tensor};
pub use sat::{build_sat, Rect, SummedAreaTable};
pub use tensor::Tensor;
