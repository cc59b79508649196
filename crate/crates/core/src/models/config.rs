//! Model configuration and its TOML file schema.
//!
//! ```toml
//! num_classes = 4
//! image_channels = 3
//! output_stride = 16
//! li_positions = [5, 6, 7]     # backbone blocks carrying an LI layer
//!
//! [li]                         # LI filter shared by backbone LI layers
//! zone_half_size = 1
//! li_rate = 1
//! sigma = 1.0
//!
//! [stem]
//! out_channels = 16
//! stride = 2
//!
//! [[blocks]]                   # one table per inverted-residual block
//! out_channels = 24
//! expansion = 4
//! stride = 2
//! dilation = 1
//!
//! [head]
//! branch_channels = 48
//! projection_channels = 48
//! rates = [6, 12, 18]
//! li_enabled = true
//! li = { zone_half_size = 1, li_rate = 1, sigma = 1.0 }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::li::LIKernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub out_channels: usize,
    pub stride: usize,
}

/// One backbone entry as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

/// Fully resolved inverted-residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LIBottleneckConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub dilation: usize,
    pub li: LIKernelSpec,
    pub li_enabled: bool,
}

impl LIBottleneckConfig {
    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_expand(&self) -> bool {
        self.expansion > 1
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion == 0 {
            return Err(Error::Config("bottleneck channel counts and expansion must be positive".into()));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config("bottleneck stride and dilation must be positive".into()));
        }
        if self.li_enabled {
            if !self.has_expand() {
                return Err(Error::Config("an LI layer needs an expansion convolution (expansion > 1)".into()));
            }
            self.li.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LIASPPConfig {
    #[serde(default)]
    pub in_channels: usize,
    pub branch_channels: usize,
    pub projection_channels: usize,
    pub rates: [usize; 3],
    #[serde(default)]
    pub li: LIKernelSpec,
    #[serde(default = "yes")]
    pub li_enabled: bool,
}

fn yes() -> bool {
    true
}

impl LIASPPConfig {
    pub fn new(in_channels: usize, branch_channels: usize, projection_channels: usize) -> Self {
        LIASPPConfig {
            in_channels,
            branch_channels,
            projection_channels,
            rates: [6, 12, 18],
            li: LIKernelSpec::default(),
            li_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 || self.projection_channels == 0 {
            return Err(Error::Config("ASPP channel counts must be positive".into()));
        }
        if self.rates.contains(&0) {
            return Err(Error::Config("ASPP dilation rates must be positive".into()));
        }
        if self.li_enabled {
            self.li.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub num_classes: usize,
    #[serde(default = "three")]
    pub image_channels: usize,
    pub output_stride: usize,
    #[serde(default)]
    pub li_positions: BTreeSet<usize>,
    #[serde(default)]
    pub li: LIKernelSpec,
    pub stem: StemConfig,
    pub blocks: Vec<BlockSpec>,
    pub head: LIASPPConfig,
}

fn three() -> usize {
    3
}

impl SegmenterConfig {
    /// Eight inverted-residual blocks widening 16→96 at output stride 16,
    /// LI at the three deepest expanding blocks and in all three head branches.
    pub fn toy(num_classes: usize) -> Self {
        let blocks = [(16, 1, 1), (24, 4, 2), (32, 4, 2), (32, 4, 1), (64, 4, 2), (64, 2, 1), (96, 2, 1), (96, 2, 1)]
            .into_iter()
            .map(|(out_channels, expansion, stride)| BlockSpec { out_channels, expansion, stride, dilation: 1 })
            .collect();
        let mut head = LIASPPConfig::new(96, 48, 48);
        head.li_enabled = true;
        SegmenterConfig {
            num_classes,
            image_channels: 3,
            output_stride: 16,
            li_positions: [5, 6, 7].into_iter().collect(),
            li: LIKernelSpec::default(),
            stem: StemConfig { out_channels: 16, stride: 2 },
            blocks,
            head,
        }
    }

    /// The same architecture with every LI layer removed.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.li_positions.clear();
        cfg.head.li_enabled = false;
        cfg
    }

    pub fn has_li(&self) -> bool {
        !self.li_positions.is_empty() || self.head.li_enabled
    }

    pub fn block(&self, i: usize) -> LIBottleneckConfig {
        let in_channels = if i == 0 { self.stem.out_channels } else { self.blocks[i - 1].out_channels };
        let b = self.blocks[i];
        LIBottleneckConfig {
            in_channels,
            out_channels: b.out_channels,
            expansion: b.expansion,
            stride: b.stride,
            dilation: b.dilation,
            li: self.li,
            li_enabled: self.li_positions.contains(&i),
        }
    }

    pub fn backbone_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.out_channels, |b| b.out_channels)
    }

    /// Head config with `in_channels` tied to the backbone output.
    pub fn head(&self) -> LIASPPConfig {
        let mut h = self.head;
        h.in_channels = self.backbone_channels();
        h
    }

    pub fn cumulative_stride(&self) -> usize {
        self.blocks.iter().fold(self.stem.stride, |acc, b| acc * b.stride)
    }

    /// Blocks with an expansion convolution, where an LI layer may be inserted.
    pub fn eligible_positions(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].expansion > 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in [2, 255], got {}", self.num_classes)));
        }
        if self.image_channels == 0 || self.stem.out_channels == 0 || self.stem.stride == 0 {
            return Err(Error::Config("image channels and stem geometry must be positive".into()));
        }
        if let Some(&p) = self.li_positions.iter().find(|&&p| p >= self.blocks.len()) {
            return Err(Error::Config(format!("li position {p} beyond {} blocks", self.blocks.len())));
        }
        for i in 0..self.blocks.len() {
            self.block(i).validate().map_err(|e| Error::Config(format!("block {i}: {e}")))?;
        }
        self.head().validate()?;
        let s = self.cumulative_stride();
        if s != self.output_stride {
            return Err(Error::Config(format!(
                "backbone strides multiply to {s}, but output_stride is {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    /// Accepts `H = k·OS` or `H = k·OS + 1`; the backbone then yields `⌈H/OS⌉`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let os = self.output_stride;
        for (name, v) in [("height", h), ("width", w)] {
            if v < os || v % os > 1 {
                return Err(Error::Config(format!(
                    "input {name} {v} must be k·{os} or k·{os}+1 for output stride {os}"
                )));
            }
        }
        Ok(())
    }

    /// Smallest accepted size `≥ v`.
    pub fn next_valid_size(&self, v: usize) -> usize {
        let os = self.output_stride;
        if v <= os {
            return os;
        }
        match v % os {
            0 | 1 => v,
            r => v + os - r,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SegmenterConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut cfg = self.clone();
        cfg.head.in_channels = self.backbone_channels();
        toml::to_string(&cfg).expect("model config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
