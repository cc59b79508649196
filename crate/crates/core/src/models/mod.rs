//! LI bottleneck, LI-ASPP head, toy segmenter, and their accounting.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod count;
pub mod features;
pub mod segmenter;

pub use blocks::{LiAspp, LiBottleneck, LiTap};
pub use config::{BlockSpec, LIASPPConfig, LIBottleneckConfig, SegmenterConfig, StemConfig};
pub use count::{count_flops, count_params, FlopReport, ParamCount};
pub use features::{li_features, write_features, FeatureDump, LiFeatures};
pub use segmenter::{SegForward, Segmenter};
