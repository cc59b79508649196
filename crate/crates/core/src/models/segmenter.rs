use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{NodeId, Tape};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::models::blocks::{ConvLayer, LiAspp, LiBottleneck, LiTap};
use crate::models::config::SegmenterConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Nodes of interest from one recorded forward.
#[derive(Debug, Clone)]
pub struct SegForward {
    pub logits: NodeId,
    pub features: NodeId,
    pub taps: Vec<LiTap>,
}

/// Stem → inverted-residual backbone → LI-ASPP → 1×1 classifier → bilinear
/// upsample to the input size.
#[derive(Debug, Clone)]
pub struct Segmenter<T> {
    pub config: SegmenterConfig,
    pub params: ParamStore<T>,
    stem: ConvLayer,
    blocks: Vec<LiBottleneck>,
    head: LiAspp,
    classifier: ConvLayer,
}

impl<T: Scalar> Segmenter<T> {
    /// Builds and initialises a model. Parameters are registered, and random
    /// draws consumed, in a fixed order that LI layers do not perturb.
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem_spec = ConvSpec::same(1, 1).with_stride(config.stem.stride);
        let stem = ConvLayer::dense(
            &mut params,
            "backbone.stem",
            config.image_channels,
            config.stem.out_channels,
            stem_spec,
            &mut rng,
        )?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for i in 0..config.blocks.len() {
            blocks.push(LiBottleneck::new(&mut params, &format!("backbone.block{i}"), config.block(i), &mut rng)?);
        }
        let head_cfg = config.head();
        let head = LiAspp::new(&mut params, "head", head_cfg, &mut rng)?;
        let classifier = ConvLayer::dense(
            &mut params,
            "classifier",
            head_cfg.projection_channels,
            config.num_classes,
            ConvSpec::pointwise(),
            &mut rng,
        )?;
        Ok(Segmenter { config, params, stem, blocks, head, classifier })
    }

    /// The same model with a different parameter store (e.g. a loaded checkpoint).
    pub fn with_params(config: SegmenterConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Segmenter::new(config, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::Config(format!(
                "model expects {} parameters, checkpoint has {}",
                m.params.len(),
                params.len()
            )));
        }
        for (id, p) in m.params.iter() {
            let q = params.param(id);
            if q.name != p.name || q.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {} does not match checkpoint entry {} {}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Segmenter<U> {
        Segmenter {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            classifier: self.classifier.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Names of every LI layer, in forward order.
    pub fn li_layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.blocks.iter().filter_map(|b| b.li.as_ref().map(|l| l.name.clone())).collect();
        names.extend(self.head.branches.iter().filter_map(|b| b.li.as_ref().map(|l| l.name.clone())));
        names
    }

    pub fn forward(&self, tape: &mut Tape<T>, image: NodeId) -> Result<SegForward> {
        self.forward_with(&self.params, tape, image)
    }

    /// Forward with an external store laid out like `self.params`.
    pub fn forward_with(&self, store: &ParamStore<T>, tape: &mut Tape<T>, image: NodeId) -> Result<SegForward> {
        let s = tape.value(image).shape();
        if s.c != self.config.image_channels {
            return Err(Error::Dimension(format!(
                "segmenter expects {} image channels, got {}",
                self.config.image_channels, s.c
            )));
        }
        self.config.check_input(s.h, s.w)?;
        let mut taps = Vec::new();
        let y = self.stem.forward(tape, store, image)?;
        let mut h = tape.relu(y);
        for b in &self.blocks {
            h = b.forward(tape, store, h, &mut taps)?;
        }
        let features = h;
        let head = self.head.forward(tape, store, h, &mut taps)?;
        let y = self.classifier.forward(tape, store, head)?;
        let logits = tape.resize(y, s.h, s.w)?;
        Ok(SegForward { logits, features, taps })
    }

    /// Logits for a batch without keeping the tape.
    pub fn infer(&self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let x = tape.input(image.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::loss::softmax_channels;
    use crate::autodiff::params::ParamGroup;
    use crate::tensor::Shape4;

    #[test]
    fn logits_shape_and_taps() {
        let m = Segmenter::<f32>::new(SegmenterConfig::toy(4), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::full(Shape4::new(2, 3, 33, 33), 0.5));
        let out = m.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out.logits).shape(), Shape4::new(2, 4, 33, 33));
        assert_eq!(tape.value(out.features).shape(), Shape4::new(2, 96, 3, 3));
        let names: Vec<_> = out.taps.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, m.li_layer_names());
        assert_eq!(names.len(), 6);
        assert_eq!(names[0], "backbone.block5.li");
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let mut m = Segmenter::<f64>::new(SegmenterConfig::toy(3), 2).unwrap();
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            m.params.value_mut(id).fill(0.0);
        }
        let p = softmax_channels(&m.infer(&Tensor4::zeros(Shape4::new(1, 3, 32, 32))).unwrap());
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Segmenter::<f32>::new(SegmenterConfig::toy(4), 1).unwrap();
        assert!(matches!(m.infer(&Tensor4::zeros(Shape4::new(1, 3, 40, 40))), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_shares_weights_with_li_model() {
        let cfg = SegmenterConfig::toy(4);
        let li = Segmenter::<f32>::new(cfg.clone(), 9).unwrap();
        let base = Segmenter::<f32>::new(cfg.baseline(), 9).unwrap();
        for (_, p) in base.params.iter() {
            let q = li.params.param(li.params.find(&p.name).unwrap());
            assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
        }
        assert_eq!(base.params.scalar_count_in(ParamGroup::LiWeights), 0);
    }
}
