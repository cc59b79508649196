//! Analytic parameter and multiply-add accounting from a config alone.

use std::fmt::Write as _;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::models::config::SegmenterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub li_weights: usize,
    pub conv_weights: usize,
    pub other: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.li_weights + self.conv_weights + self.other
    }
}

fn dense(pc: &mut ParamCount, c_in: usize, c_out: usize, taps: usize) {
    pc.conv_weights += c_in * c_out * taps;
    pc.other += c_out;
}

fn depthwise(pc: &mut ParamCount, c: usize, taps: usize) {
    pc.conv_weights += c * taps;
    pc.other += c;
}

/// Exact trainable-scalar count of the model `cfg` describes.
pub fn count_params(cfg: &SegmenterConfig) -> ParamCount {
    let mut pc = ParamCount::default();
    dense(&mut pc, cfg.image_channels, cfg.stem.out_channels, 9);
    for i in 0..cfg.blocks.len() {
        let b = cfg.block(i);
        let hidden = b.hidden_channels();
        if b.has_expand() {
            dense(&mut pc, b.in_channels, hidden, 1);
        }
        if b.li_enabled {
            pc.li_weights += hidden;
        }
        depthwise(&mut pc, hidden, 9);
        dense(&mut pc, hidden, b.out_channels, 1);
    }
    let h = cfg.head();
    dense(&mut pc, h.in_channels, h.branch_channels, 1);
    for _ in 0..3 {
        if h.li_enabled {
            pc.li_weights += h.in_channels;
        }
        depthwise(&mut pc, h.in_channels, 9);
        dense(&mut pc, h.in_channels, h.branch_channels, 1);
    }
    dense(&mut pc, h.in_channels, h.branch_channels, 1);
    dense(&mut pc, 5 * h.branch_channels, h.projection_channels, 1);
    dense(&mut pc, h.projection_channels, cfg.num_classes, 1);
    pc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Depthwise,
    Li,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Li => "li",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopRow {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn li(&self) -> u64 {
        self.rows.iter().filter(|r| r.kind == LayerKind::Li).map(|r| r.macs).sum()
    }

    pub fn li_fraction(&self) -> f64 {
        self.li() as f64 / self.total() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.kind.as_str(), r.macs);
        }
        let _ = writeln!(s, "total,all,{}", self.total());
        let _ = writeln!(s, "total,li,{}", self.li());
        s
    }
}

/// Multiply-adds of a dense conv: `C_in·C_out·taps·H_out·W_out`.
pub fn conv_macs(c_in: usize, c_out: usize, taps: usize, h_out: usize, w_out: usize) -> u64 {
    (c_in * c_out * taps * h_out * w_out) as u64
}

/// Multiply-adds of an LI layer: `C·H·W·((2t+1)² − 1)`; the unit centre tap is free.
pub fn li_macs(channels: usize, h: usize, w: usize, zone_half_size: usize) -> u64 {
    let z = 2 * zone_half_size + 1;
    (channels * h * w * (z * z - 1)) as u64
}

/// Per-layer multiply-add counts for one `h×w` image.
pub fn count_flops(cfg: &SegmenterConfig, h: usize, w: usize) -> Result<FlopReport> {
    let mut rows = Vec::new();
    let mut push = |name: String, kind, macs| rows.push(FlopRow { name, kind, macs });
    let stem = ConvSpec::same(1, 1).with_stride(cfg.stem.stride);
    let (mut fh, mut fw) = (stem.output_len(h)?, stem.output_len(w)?);
    push("backbone.stem".into(), LayerKind::Conv, conv_macs(cfg.image_channels, cfg.stem.out_channels, 9, fh, fw));
    for i in 0..cfg.blocks.len() {
        let b = cfg.block(i);
        let name = format!("backbone.block{i}");
        let hidden = b.hidden_channels();
        if b.has_expand() {
            push(format!("{name}.expand"), LayerKind::Conv, conv_macs(b.in_channels, hidden, 1, fh, fw));
        }
        if b.li_enabled {
            push(format!("{name}.li"), LayerKind::Li, li_macs(hidden, fh, fw, b.li.zone_half_size));
        }
        let dw = ConvSpec::same(1, b.dilation).with_stride(b.stride);
        let (oh, ow) = (dw.output_len(fh)?, dw.output_len(fw)?);
        push(format!("{name}.dw"), LayerKind::Depthwise, (hidden * 9 * oh * ow) as u64);
        push(format!("{name}.project"), LayerKind::Conv, conv_macs(hidden, b.out_channels, 1, oh, ow));
        (fh, fw) = (oh, ow);
    }
    let hc = cfg.head();
    let (cin, cb) = (hc.in_channels, hc.branch_channels);
    push("head.branch0".into(), LayerKind::Conv, conv_macs(cin, cb, 1, fh, fw));
    for i in 1..=3 {
        if hc.li_enabled {
            push(format!("head.branch{i}.li"), LayerKind::Li, li_macs(cin, fh, fw, hc.li.zone_half_size));
        }
        push(format!("head.branch{i}.dw"), LayerKind::Depthwise, (cin * 9 * fh * fw) as u64);
        push(format!("head.branch{i}.pw"), LayerKind::Conv, conv_macs(cin, cb, 1, fh, fw));
    }
    push("head.pool".into(), LayerKind::Conv, conv_macs(cin, cb, 1, 1, 1));
    push("head.project".into(), LayerKind::Conv, conv_macs(5 * cb, hc.projection_channels, 1, fh, fw));
    push("classifier".into(), LayerKind::Conv, conv_macs(hc.projection_channels, cfg.num_classes, 1, fh, fw));
    Ok(FlopReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamGroup;
    use crate::models::segmenter::Segmenter;

    #[test]
    fn formulas() {
        assert_eq!(conv_macs(8, 4, 1, 16, 16), 8192);
        assert_eq!(li_macs(8, 16, 16, 1), 16384);
    }

    #[test]
    fn analytic_count_matches_built_store() {
        for cfg in [SegmenterConfig::toy(4), SegmenterConfig::toy(7).baseline()] {
            let m = Segmenter::<f32>::new(cfg.clone(), 0).unwrap();
            let pc = count_params(&cfg);
            assert_eq!(pc.total(), m.params.scalar_count());
            assert_eq!(pc.li_weights, m.params.scalar_count_in(ParamGroup::LiWeights));
            assert_eq!(pc.conv_weights, m.params.scalar_count_in(ParamGroup::ConvWeights));
        }
    }

    #[test]
    fn toy_backbone_delta_is_expansion_widths() {
        let mut cfg = SegmenterConfig::toy(4);
        cfg.head.li_enabled = false;
        let widths: usize = cfg.li_positions.iter().map(|&i| cfg.block(i).hidden_channels()).sum();
        let delta = count_params(&cfg).total() - count_params(&cfg.baseline()).total();
        assert_eq!(delta, widths);
        assert_eq!(widths, 128 + 128 + 192);
    }

    #[test]
    fn toy_li_share_under_two_percent() {
        let cfg = SegmenterConfig::toy(4);
        for size in [65, 129] {
            let r = count_flops(&cfg, size, size).unwrap();
            assert!(r.li_fraction() < 0.02, "{size}: {}", r.li_fraction());
            let b = count_flops(&cfg.baseline(), size, size).unwrap();
            assert_eq!(r.total() - b.total(), r.li());
        }
    }
}
