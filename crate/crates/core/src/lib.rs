//! Dilated convolutions with lateral inhibition (LI-Conv).
//!
//! The crate covers the full stack for desk-scale experiments: dense tensors
//! and dilated convolutions, the LI filter and layer, a small reverse-mode
//! tape with Adam and two-phase training, the LI-ASPP head and LI
//! bottleneck, synthetic segmentation data and mIoU evaluation, and slow
//! reference oracles for verification.

pub mod autodiff;
pub mod bench;
pub mod conv;
pub mod data;
pub mod error;
pub mod li;
pub mod lit4;
pub mod models;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use conv::{ConvSpec, Padding};
pub use error::{Error, Result};
pub use li::{LIConvConfig, LIKernelSpec, LILayerParams};
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};
