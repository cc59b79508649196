//! Segmentation samples, synthetic data, augmentation, and metrics.

pub mod augment;
pub mod eval;
pub mod io;
pub mod labels;
pub mod metrics;
pub mod synthetic;

pub use augment::random_scale_augment;
pub use eval::{evaluate, multiscale_eval, predict};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use metrics::{ConfusionMatrix, MiouReport};
pub use synthetic::gen_synthetic_contours;

use crate::tensor::Tensor4;

/// One `(1,C,H,W)` image in `[0,1]` with its `1×H×W` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor4<f32>,
    pub labels: LabelMap,
}
