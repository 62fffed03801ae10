use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named, trainable (or frozen) tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replace the value, resetting the gradient to the new shape.
    pub fn set_value(&mut self, value: Tensor<T>) {
        self.grad = Tensor::zeros(value.shape().to_vec());
        self.value = value;
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Ordered collection of parameters. Ids are insertion indices and stay stable
/// for the lifetime of the store; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Insert a new parameter. Panics on duplicate names, which would be a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "parameter `{name}` registered twice");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(self.get(self.require(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let id = self.require(name)?;
        Ok(self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(Parameter::numel)
            .sum()
    }

    /// Add `scale * grad` into the stored gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>, scale: T) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: p.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g = *g + scale * d;
        }
        Ok(())
    }

    /// Order-sensitive checksum of all frozen values, used to confirm that
    /// optimizer steps leave them untouched.
    pub fn frozen_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.frozen) {
            bytes.extend_from_slice(p.name.as_bytes());
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
        fnv1a(&bytes)
    }

    /// Convert every parameter to another precision (names, frozen flags kept).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
