//! Reverse-mode tape over the layer operations used by the models.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Tape::backward`] walks it once in reverse. A node
//! only receives a gradient when some ancestor requires one (a trainable
//! parameter or an input registered with [`Tape::input_with_grad`]), which
//! lets frozen sub-graphs skip their backward work entirely.

use crate::autodiff::loss::{cross_entropy_grad, pixel_cross_entropy, softmax_channels};
use crate::autodiff::params::{ParamGroup, ParamId, ParamStore};
use crate::conv::{self, ConvSpec, GradMask};
use crate::data::labels::LabelMap;
use crate::error::{Error, Result};
use crate::li::{self, LIKernelSpec};
use crate::scalar::Scalar;
use crate::tensor::{self, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec },
    Depthwise { x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec },
    LiSurround { x: NodeId, spec: LIKernelSpec },
    LiCombine { x: NodeId, surround: NodeId, w_l: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Resize(NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    CrossEntropy { logits: NodeId, labels: LabelMap, ignore_index: u8, count: usize },
    L2 { weights: Vec<NodeId>, lambda: f64 },
    AddScalars(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op,
    requires_grad: bool,
    /// Cached softmax for cross-entropy nodes.
    aux: Option<Tensor4<T>>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor4<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn scalar_shape() -> Shape4 {
    Shape4::new(1, 1, 1, 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor4<T> {
        &self.nodes[node.0].value
    }

    /// Value of a `(1,1,1,1)` node.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.nodes[node.0].value.data()[0].as_f64()
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn push(&mut self, value: Tensor4<T>, op: Op, requires_grad: bool) -> NodeId {
        self.push_aux(value, op, requires_grad, None)
    }

    fn push_aux(&mut self, value: Tensor4<T>, op: Op, requires_grad: bool, aux: Option<Tensor4<T>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad, aux });
        id
    }

    fn rg(&self, n: NodeId) -> bool {
        self.nodes[n.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn input_with_grad(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Records a parameter leaf; frozen parameters do not require gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(value, Op::Param(id), !store.is_frozen(id))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let value = {
            let b = bias.map(|b| self.value(b).data());
            conv::conv2d_dilated(self.value(x), self.value(w), &spec, b)?
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, bias, spec }, rg))
    }

    pub fn depthwise(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let value = {
            let b = bias.map(|b| self.value(b).data());
            conv::depthwise_conv2d_dilated(self.value(x), self.value(w), &spec, b)?
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Depthwise { x, w, bias, spec }, rg))
    }

    /// LI layer with intensities read from a `(1, C, 1, 1)` node.
    /// LI layer as surround correlation then per-channel combination.
    pub fn li_layer(&mut self, x: NodeId, w_l: NodeId, spec: LIKernelSpec) -> Result<NodeId> {
        let s = self.li_surround(x, spec)?;
        self.li_combine(x, s, w_l)
    }

    /// `G ⋆ x`; layers inhibiting the same input with the same filter shape
    /// can share it.
    pub fn li_surround(&mut self, x: NodeId, spec: LIKernelSpec) -> Result<NodeId> {
        let value = li::li_surround(self.value(x), &spec)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LiSurround { x, spec }, rg))
    }

    /// `x − w_c·surround`.
    pub fn li_combine(&mut self, x: NodeId, surround: NodeId, w_l: NodeId) -> Result<NodeId> {
        let value = li::li_combine(self.value(x), self.value(surround), self.value(w_l).data())?;
        let rg = self.rg(x) || self.rg(surround) || self.rg(w_l);
        Ok(self.push(value, Op::LiCombine { x, surround, w_l }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::global_avg_pool(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn resize(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let value = tensor::bilinear_resize(self.value(x), h, w)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize(x), rg))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor4<T>> = xs.iter().map(|&n| self.value(n)).collect();
            tensor::concat_channels(&vals)?
        };
        let rg = xs.iter().any(|&n| self.rg(n));
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor4::full(scalar_shape(), T::from_f64(s)), Op::Sum(x), rg)
    }

    /// Mean pixel cross-entropy over non-ignored labels, as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &LabelMap, ignore_index: u8) -> Result<NodeId> {
        let (l, count) = pixel_cross_entropy(self.value(logits), labels, ignore_index)?;
        let probs = softmax_channels(self.value(logits));
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, labels: labels.clone(), ignore_index, count };
        Ok(self.push_aux(Tensor4::full(scalar_shape(), T::from_f64(l)), op, rg, Some(probs)))
    }

    /// `lambda·Σ‖w‖²` over the given weight nodes, as a scalar node.
    pub fn l2(&mut self, weights: &[NodeId], lambda: f64) -> NodeId {
        let s: f64 = weights.iter().map(|&w| self.value(w).sum_sq()).sum();
        let rg = weights.iter().any(|&w| self.rg(w));
        self.push(Tensor4::full(scalar_shape(), T::from_f64(lambda * s)), Op::L2 { weights: weights.to_vec(), lambda }, rg)
    }

    pub fn add_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let s: f64 = xs.iter().map(|&x| self.scalar(x)).sum();
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor4::full(scalar_shape(), T::from_f64(s)), Op::AddScalars(xs.to_vec()), rg)
    }

    /// Parameter leaves recorded on this tape for trainable conv weights.
    pub fn conv_weight_leaves(&self, store: &ParamStore<T>) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if store.param(id).group == ParamGroup::ConvWeights && !store.is_frozen(id) => {
                    Some(NodeId(i))
                }
                _ => None,
            })
            .collect()
    }

    /// Cross-entropy plus L2 over the trainable conv weights on this tape.
    pub fn loss_with_l2(
        &mut self,
        logits: NodeId,
        labels: &LabelMap,
        ignore_index: u8,
        l2_lambda: f64,
        store: &ParamStore<T>,
    ) -> Result<NodeId> {
        let ce = self.cross_entropy(logits, labels, ignore_index)?;
        if l2_lambda == 0.0 {
            return Ok(ce);
        }
        let weights = self.conv_weight_leaves(store);
        let l2 = self.l2(&weights, l2_lambda);
        Ok(self.add_scalars(&[ce, l2]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).shape() != scalar_shape() {
            return Err(Error::Dimension(format!("backward from non-scalar node {}", self.value(loss).shape())));
        }
        self.backward_seeded(loss, Tensor4::full(scalar_shape(), T::one()))
    }

    /// Reverse sweep from any node with upstream gradient `seed`, i.e. the
    /// gradient of `⟨seed, value(node)⟩`.
    pub fn backward_seeded(&self, node: NodeId, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(node).shape() {
            return Err(Error::Dimension(format!("seed {} for node of shape {}", seed.shape(), self.value(node).shape())));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed);
        for i in (0..=node.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter-leaf gradient into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.collect_into(&grads, store)
    }

    /// Adds every parameter-leaf gradient of `grads` into `store`.
    pub fn collect_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.accumulate_grad(id, g)?;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, bias, spec } | Op::Depthwise { x, w, bias, spec } => {
                let mask = GradMask {
                    input: self.rg(*x),
                    weight: self.rg(*w),
                    bias: bias.is_some_and(|b| self.rg(b)),
                };
                let cg = if matches!(node.op, Op::Conv { .. }) {
                    conv::conv2d_dilated_backward(self.value(*x), self.value(*w), spec, g, mask)?
                } else {
                    conv::depthwise_conv2d_dilated_backward(self.value(*x), self.value(*w), spec, g, mask)?
                };
                if let Some(gx) = cg.input {
                    accumulate(grads, *x, gx)?;
                }
                if let Some(gw) = cg.weight {
                    accumulate(grads, *w, gw)?;
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    let shape = self.value(*b).shape();
                    accumulate(grads, *b, Tensor4::from_vec(shape, gb)?)?;
                }
            }
            Op::LiSurround { x, spec } => {
                if self.rg(*x) {
                    accumulate(grads, *x, li::li_surround_adjoint(g, spec))?;
                }
            }
            Op::LiCombine { x, surround, w_l } => {
                let wl = self.value(*w_l);
                if self.rg(*surround) || self.rg(*w_l) {
                    let (gs, gw) = li::li_combine_backward(self.value(*surround), wl.data(), g)?;
                    if self.rg(*surround) {
                        accumulate(grads, *surround, gs)?;
                    }
                    if self.rg(*w_l) {
                        accumulate(grads, *w_l, Tensor4::from_vec(wl.shape(), gw)?)?;
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, tensor::relu_backward(self.value(*x), g)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, tensor::global_avg_pool_backward(self.value(*x).shape(), g)?)?;
                }
            }
            Op::Resize(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, tensor::bilinear_resize_backward(self.value(*x).shape(), g)?)?;
                }
            }
            Op::Concat(xs) => {
                let channels: Vec<usize> = xs.iter().map(|&n| self.value(n).shape().c).collect();
                let parts = tensor::concat_channels_backward(&channels, g)?;
                for (&n, part) in xs.iter().zip(parts) {
                    if self.rg(n) {
                        accumulate(grads, n, part)?;
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let up = g.data()[0];
                    accumulate(grads, *x, Tensor4::full(self.value(*x).shape(), up))?;
                }
            }
            Op::CrossEntropy { logits, labels, ignore_index, count } => {
                if self.rg(*logits) {
                    let probs = node.aux.as_ref().expect("cross-entropy caches its softmax");
                    let up = g.data()[0].as_f64();
                    accumulate(grads, *logits, cross_entropy_grad(probs, labels, *ignore_index, *count, up))?;
                }
            }
            Op::L2 { weights, lambda } => {
                let up = g.data()[0].as_f64();
                for &w in weights {
                    if self.rg(w) {
                        let k = T::from_f64(2.0 * lambda * up);
                        accumulate(grads, w, self.value(w).scale(k))?;
                    }
                }
            }
            Op::AddScalars(xs) => {
                for &x in xs {
                    if self.rg(x) {
                        accumulate(grads, x, g.clone())?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], node: NodeId, g: Tensor4<T>) -> Result<()> {
    match &mut grads[node.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels::IGNORE_INDEX;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.input_with_grad(Tensor4::random_uniform(Shape4::new(2, 3, 4, 5), -1.0, 1.0, &mut rng));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_param_receives_nothing() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor4::full(Shape4::new(2, 1, 1, 1), 0.5), ParamGroup::ConvWeights).unwrap();
        let v = store.add("v", Tensor4::full(Shape4::new(2, 2, 1, 1), 0.5), ParamGroup::ConvWeights).unwrap();
        store.set_frozen(w, true);
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0));
        let wn = tape.param(&store, w);
        let vn = tape.param(&store, v);
        let h = tape.conv2d(x, wn, None, ConvSpec::pointwise()).unwrap();
        let y = tape.conv2d(h, vn, None, ConvSpec::pointwise()).unwrap();
        let s = tape.sum(y);
        tape.backward_into(s, &mut store).unwrap();
        assert!(store.grad(w).data().iter().all(|&v| v == 0.0));
        assert!(store.grad(v).data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn disconnected_param_has_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0), ParamGroup::ConvWeights).unwrap();
        let u = store.add("unused", Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0), ParamGroup::ConvWeights).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0));
        let wn = tape.param(&store, w);
        let y = tape.conv2d(x, wn, None, ConvSpec::pointwise()).unwrap();
        let s = tape.sum(y);
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[4.0]);
        assert_eq!(store.grad(u).data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_grad_matches_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let logits = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let l = tape.input_with_grad(logits);
        let labels = LabelMap::new(1, 1, 2, vec![0, IGNORE_INDEX]).unwrap();
        let loss = tape.cross_entropy(l, &labels, IGNORE_INDEX).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let g = g.get(l).unwrap();
        assert!((g.at(0, 0, 0, 0) + 0.5).abs() < 1e-12);
        assert!((g.at(0, 1, 0, 0) - 0.5).abs() < 1e-12);
        assert_eq!(g.at(0, 0, 0, 1), 0.0);
        assert_eq!(g.at(0, 1, 0, 1), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input_with_grad(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }
}
