use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    LiWeights,
    ConvWeights,
    Other,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::LiWeights => "li_weights",
            ParamGroup::ConvWeights => "conv_weights",
            ParamGroup::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "li_weights" => Some(ParamGroup::LiWeights),
            "conv_weights" => Some(ParamGroup::ConvWeights),
            "other" => Some(ParamGroup::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub frozen: bool,
    pub group: ParamGroup,
}

/// Named trainable tensors with gradient slots and freeze flags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Param { name: name.clone(), value, grad, frozen: false, group });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = false);
    }

    /// Freezes every parameter outside `group`.
    pub fn freeze_all_except(&mut self, group: ParamGroup) {
        for p in &mut self.params {
            p.frozen = p.group != group;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor4<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Ok(());
        }
        p.grad.add_assign(g)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalar_count_in(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    frozen: p.frozen,
                    group: p.group,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), ParamGroup::Other).unwrap();
        assert!(s.add("a", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), ParamGroup::Other).is_err());
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor4::zeros(Shape4::new(1, 2, 1, 1)), ParamGroup::ConvWeights).unwrap();
        let b = s.add("b", Tensor4::zeros(Shape4::new(1, 2, 1, 1)), ParamGroup::LiWeights).unwrap();
        s.freeze_all_except(ParamGroup::LiWeights);
        let g = Tensor4::full(Shape4::new(1, 2, 1, 1), 1.0);
        s.accumulate_grad(a, &g).unwrap();
        s.accumulate_grad(b, &g).unwrap();
        assert_eq!(s.grad(a).sum(), 0.0);
        assert_eq!(s.grad(b).sum(), 2.0);
        assert_eq!(s.trainable_count(), 2);
    }
}
