use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Coarse role of a parameter, used by freeze policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Alignment,
    Expert,
    Router,
    Prompt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
}

/// Named parameters with gradient buffers.
///
/// A gradient of `None` means the parameter took no part in the current
/// step; the optimizer leaves such parameters untouched.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value, grad: None, trainable: true });
        Ok(ParamId(id))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn set_prefix_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    /// Multiplies every present gradient by `s`.
    pub fn scale_grads(&mut self, s: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g {
                *v *= s;
            }
        }
    }

    pub(crate) fn raw(&self) -> &[Param<T>] {
        &self.params
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            if let Some(&j) = other.index.get(&p.name) {
                let src = &other.params[j].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::Dimension(format!("parameter {} changed shape", p.name)));
                }
                p.value = src.clone();
            }
        }
        Ok(())
    }

    /// SHA-256 over names and values of the selected parameters (f64 bytes).
    pub fn digest(&self, mut select: impl FnMut(&str, ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(&p.name, p.group)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
