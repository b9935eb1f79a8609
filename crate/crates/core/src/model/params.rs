use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::layers::{param_name, LayerDescriptor, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the normal initializer for conv and linear weights.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every parameter of `layout`, drawing in layout order.
    pub fn init_from_layout<R: Rng + ?Sized>(layout: &[LayerDescriptor], rng: &mut R) -> Self {
        let mut store = Self::new();
        for d in layout {
            for (field, shape) in d.param_shapes() {
                let t = match (d.kind, field) {
                    (LayerKind::Norm, "weight") => Tensor::full(&shape, T::one()),
                    (_, "bias") => Tensor::zeros(&shape),
                    _ => Tensor::randn(&shape, INIT_STD, rng),
                };
                store.insert(param_name(&d.layer_id, field), t);
            }
        }
        store
    }

    /// Checks that the store holds exactly the parameters of `layout` with matching shapes.
    pub fn check_layout(&self, layout: &[LayerDescriptor]) -> Result<()> {
        let mut expected = 0;
        for d in layout {
            for (field, shape) in d.param_shapes() {
                let name = param_name(&d.layer_id, field);
                let t = self.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Compatibility(format!(
                        "parameter {name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )));
                }
                expected += 1;
            }
        }
        if expected != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "expected {expected} parameter tensors, found {}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Per-tensor checksums keyed by name.
    pub fn tensor_checksums(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), hex::encode(Sha256::digest(t.to_le_bytes()))))
            .collect()
    }
}
