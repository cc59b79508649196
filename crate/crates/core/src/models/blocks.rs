//! LI bottleneck and LI-ASPP head, recorded onto a [`Tape`].

use rand::Rng;

use crate::autodiff::params::{ParamGroup, ParamId, ParamStore};
use crate::autodiff::tape::{NodeId, Tape};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::li::LIKernelSpec;
use crate::models::config::{LIASPPConfig, LIBottleneckConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Pre- and post-LI activations of one LI layer in a recorded forward.
#[derive(Debug, Clone)]
pub struct LiTap {
    pub name: String,
    pub pre: NodeId,
    pub post: NodeId,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub depthwise: bool,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn dense<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = spec.kernel_size();
        let std = (2.0 / (c_in * spec.taps()) as f64).sqrt();
        let w = Tensor4::random_normal(Shape4::new(c_out, c_in, k, k), std, rng);
        let weight = store.add(format!("{name}.w"), w, ParamGroup::ConvWeights)?;
        let bias = store.add(format!("{name}.b"), Tensor4::zeros(Shape4::new(1, c_out, 1, 1)), ParamGroup::Other)?;
        Ok(ConvLayer { weight, bias, spec, depthwise: false })
    }

    pub fn depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = spec.kernel_size();
        let std = (2.0 / spec.taps() as f64).sqrt();
        let w = Tensor4::random_normal(Shape4::new(channels, 1, k, k), std, rng);
        let weight = store.add(format!("{name}.w"), w, ParamGroup::ConvWeights)?;
        let bias = store.add(format!("{name}.b"), Tensor4::zeros(Shape4::new(1, channels, 1, 1)), ParamGroup::Other)?;
        Ok(ConvLayer { weight, bias, spec, depthwise: true })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        if self.depthwise {
            tape.depthwise(x, w, Some(b), self.spec)
        } else {
            tape.conv2d(x, w, Some(b), self.spec)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiLayer {
    pub name: String,
    pub w_l: ParamId,
    pub spec: LIKernelSpec,
}

impl LiLayer {
    /// Zero-initialised intensities; draws nothing from any RNG, so an LI model
    /// and its baseline built from one seed share every other weight.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, spec: LIKernelSpec) -> Result<Self> {
        let w_l = store.add(format!("{name}.w_l"), Tensor4::zeros(Shape4::new(1, channels, 1, 1)), ParamGroup::LiWeights)?;
        Ok(LiLayer { name: name.to_string(), w_l, spec })
    }

    /// LI layer then φ = ReLU; `x` must already be rectified.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        taps: &mut Vec<LiTap>,
    ) -> Result<NodeId> {
        let surround = tape.li_surround(x, self.spec)?;
        self.forward_with_surround(tape, store, x, surround, taps)
    }

    /// As [`LiLayer::forward`], reusing `surround = li_surround(x)` computed
    /// with this layer's filter shape.
    pub fn forward_with_surround<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        surround: NodeId,
        taps: &mut Vec<LiTap>,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.w_l);
        let post = tape.li_combine(x, surround, w)?;
        taps.push(LiTap { name: self.name.clone(), pre: x, post });
        Ok(tape.relu(post))
    }
}

/// Inverted residual: 1×1 expand → ReLU → [LI → ReLU] → 3×3 depthwise → ReLU
/// → linear 1×1 projection, plus the identity skip when shapes allow.
#[derive(Debug, Clone)]
pub struct LiBottleneck {
    pub config: LIBottleneckConfig,
    pub expand: Option<ConvLayer>,
    pub li: Option<LiLayer>,
    pub depthwise: ConvLayer,
    pub project: ConvLayer,
}

impl LiBottleneck {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: LIBottleneckConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_channels();
        let expand = if cfg.has_expand() {
            Some(ConvLayer::dense(store, &format!("{name}.expand"), cfg.in_channels, hidden, ConvSpec::pointwise(), rng)?)
        } else {
            None
        };
        let li = if cfg.li_enabled { Some(LiLayer::new(store, &format!("{name}.li"), hidden, cfg.li)?) } else { None };
        let dw_spec = ConvSpec::same(1, cfg.dilation).with_stride(cfg.stride);
        let depthwise = ConvLayer::depthwise(store, &format!("{name}.dw"), hidden, dw_spec, rng)?;
        let project = ConvLayer::dense(store, &format!("{name}.project"), hidden, cfg.out_channels, ConvSpec::pointwise(), rng)?;
        Ok(LiBottleneck { config: cfg, expand, li, depthwise, project })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        taps: &mut Vec<LiTap>,
    ) -> Result<NodeId> {
        let c = tape.value(x).shape().c;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!("bottleneck expects {} channels, got {c}", self.config.in_channels)));
        }
        let mut h = x;
        if let Some(e) = &self.expand {
            let y = e.forward(tape, store, h)?;
            h = tape.relu(y);
        }
        if let Some(li) = &self.li {
            h = li.forward(tape, store, h, taps)?;
        }
        let y = self.depthwise.forward(tape, store, h)?;
        let h = tape.relu(y);
        let out = self.project.forward(tape, store, h)?;
        if self.config.has_residual() {
            tape.add(out, x)
        } else {
            Ok(out)
        }
    }
}

/// One `[LI → ReLU] → depthwise dilated 3×3 → ReLU → 1×1 → ReLU` branch.
#[derive(Debug, Clone)]
pub struct AsppBranch {
    pub li: Option<LiLayer>,
    pub depthwise: ConvLayer,
    pub pointwise: ConvLayer,
}

/// Five parallel branches (1×1, three dilated separable LI-Convs, image
/// pooling) over the rectified input, concatenated and projected by 1×1.
#[derive(Debug, Clone)]
pub struct LiAspp {
    pub config: LIASPPConfig,
    pub conv1x1: ConvLayer,
    pub branches: Vec<AsppBranch>,
    pub pool: ConvLayer,
    pub project: ConvLayer,
}

impl LiAspp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: LIASPPConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (cin, cb) = (cfg.in_channels, cfg.branch_channels);
        let conv1x1 = ConvLayer::dense(store, &format!("{name}.branch0"), cin, cb, ConvSpec::pointwise(), rng)?;
        let mut branches = Vec::with_capacity(3);
        for (i, &rate) in cfg.rates.iter().enumerate() {
            let bname = format!("{name}.branch{}", i + 1);
            let li = if cfg.li_enabled { Some(LiLayer::new(store, &format!("{bname}.li"), cin, cfg.li)?) } else { None };
            let depthwise = ConvLayer::depthwise(store, &format!("{bname}.dw"), cin, ConvSpec::same(1, rate), rng)?;
            let pointwise = ConvLayer::dense(store, &format!("{bname}.pw"), cin, cb, ConvSpec::pointwise(), rng)?;
            branches.push(AsppBranch { li, depthwise, pointwise });
        }
        let pool = ConvLayer::dense(store, &format!("{name}.pool"), cin, cb, ConvSpec::pointwise(), rng)?;
        let project =
            ConvLayer::dense(store, &format!("{name}.project"), 5 * cb, cfg.projection_channels, ConvSpec::pointwise(), rng)?;
        Ok(LiAspp { config: cfg, conv1x1, branches, pool, project })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        taps: &mut Vec<LiTap>,
    ) -> Result<NodeId> {
        let s = tape.value(x).shape();
        if s.c != self.config.in_channels {
            return Err(Error::Dimension(format!("ASPP expects {} channels, got {}", self.config.in_channels, s.c)));
        }
        let x = tape.relu(x);
        let mut outs = Vec::with_capacity(5);
        let b0 = self.conv1x1.forward(tape, store, x)?;
        outs.push(tape.relu(b0));
        // Every branch inhibits the same input with the same filter shape.
        let surround = if self.config.li_enabled { Some(tape.li_surround(x, self.config.li)?) } else { None };
        for br in &self.branches {
            let h = match (&br.li, surround) {
                (Some(li), Some(s)) => li.forward_with_surround(tape, store, x, s, taps)?,
                _ => x,
            };
            let y = br.depthwise.forward(tape, store, h)?;
            let h = tape.relu(y);
            let y = br.pointwise.forward(tape, store, h)?;
            outs.push(tape.relu(y));
        }
        let g = tape.global_avg_pool(x)?;
        let g = self.pool.forward(tape, store, g)?;
        let g = tape.relu(g);
        outs.push(tape.resize(g, s.h, s.w)?);
        let cat = tape.concat(&outs)?;
        let y = self.project.forward(tape, store, cat)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bottleneck_cfg(li_enabled: bool, stride: usize, cin: usize, cout: usize) -> LIBottleneckConfig {
        LIBottleneckConfig {
            in_channels: cin,
            out_channels: cout,
            expansion: 3,
            stride,
            dilation: 1,
            li: LIKernelSpec::default(),
            li_enabled,
        }
    }

    fn run_bottleneck(cfg: LIBottleneckConfig, seed: u64, x: &Tensor4<f64>, zero_convs: bool) -> Tensor4<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = LiBottleneck::new(&mut store, "b", cfg, &mut rng).unwrap();
        if zero_convs {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                store.value_mut(id).fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let y = block.forward(&mut tape, &store, xn, &mut Vec::new()).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_li_bottleneck_is_bitwise_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random_normal(Shape4::new(2, 4, 9, 9), 1.0, &mut rng);
        let with = run_bottleneck(bottleneck_cfg(true, 1, 4, 4), 11, &x, false);
        let without = run_bottleneck(bottleneck_cfg(false, 1, 4, 4), 11, &x, false);
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn zero_weights_give_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::random_normal(Shape4::new(1, 4, 6, 6), 1.0, &mut rng);
        let y = run_bottleneck(bottleneck_cfg(true, 1, 4, 4), 0, &x, true);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn strided_block_shape_and_no_skip() {
        let cfg = bottleneck_cfg(false, 2, 4, 6);
        assert!(!cfg.has_residual());
        let x = Tensor4::full(Shape4::new(1, 4, 9, 9), 0.5);
        assert_eq!(run_bottleneck(cfg, 0, &x, false).shape(), Shape4::new(1, 6, 5, 5));
    }

    #[test]
    fn aspp_shape_and_li_taps() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LIASPPConfig { rates: [1, 2, 3], ..LIASPPConfig::new(6, 4, 5) };
        let aspp = LiAspp::new(&mut store, "head", cfg, &mut rng).unwrap();
        assert_eq!(store.scalar_count_in(ParamGroup::LiWeights), 18);
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::random_normal(Shape4::new(2, 6, 7, 8), 1.0, &mut rng));
        let mut taps = Vec::new();
        let y = aspp.forward(&mut tape, &store, x, &mut taps).unwrap();
        assert_eq!(tape.value(y).shape(), Shape4::new(2, 5, 7, 8));
        let names: Vec<_> = taps.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["head.branch1.li", "head.branch2.li", "head.branch3.li"]);
        let wrong = tape.input(Tensor4::zeros(Shape4::new(1, 3, 4, 4)));
        assert!(aspp.forward(&mut tape, &store, wrong, &mut taps).is_err());
    }
}
