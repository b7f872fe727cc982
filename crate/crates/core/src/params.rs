//! Named parameter storage and gradient buffers.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Shape4, Tensor4};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

/// Parameters in insertion order, each paired with a gradient accumulator of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Shape4>,
        fan_in: usize,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, rng.uniform_tensor(shape, bound))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Fresh zeroed buffer shaped like this store's gradients.
    pub fn grad_buffer(&self) -> Grads<T> {
        Grads {
            slots: self
                .params
                .iter()
                .map(|p| Tensor4::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Adds a gradient buffer into the accumulators. Single writer.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        assert_eq!(grads.slots.len(), self.params.len(), "gradient buffer from another store");
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Per-worker gradient buffer, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Tensor4<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn slot_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.slots[id.0]
    }

    pub fn slot(&self, id: ParamId) -> &Tensor4<T> {
        &self.slots[id.0]
    }

    pub fn add_to(&mut self, id: ParamId, values: &[T]) {
        let slot = self.slots[id.0].data_mut();
        assert_eq!(slot.len(), values.len(), "gradient length mismatch");
        for (a, &b) in slot.iter_mut().zip(values) {
            *a += b;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for slot in &mut self.slots {
            for v in slot.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor4<T>> {
        self.slots.iter()
    }

    pub fn squared_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.to_f64() * v.to_f64())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor4::zeros((1, 1, 1, 1))).unwrap();
        assert!(store.add("w", Tensor4::zeros((1, 1, 1, 1))).is_err());
    }

    #[test]
    fn grads_match_param_shapes() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::<f32>::new();
        let a = store.add_uniform("a", (4, 2, 3, 3), 18, &mut rng).unwrap();
        let b = store.add_uniform("b", (1, 4, 1, 1), 4, &mut rng).unwrap();
        for id in [a, b] {
            assert_eq!(store.grad(id).shape(), store.value(id).shape());
        }
        let bound = 1.0 / 18f32.sqrt();
        assert!(store.value(a).data().iter().all(|v| v.abs() <= bound));
        let mut buf = store.grad_buffer();
        buf.add_to(b, &[1.0, 2.0, 3.0, 4.0]);
        store.accumulate(&buf);
        store.accumulate(&buf);
        assert_eq!(store.grad(b).data(), &[2.0, 4.0, 6.0, 8.0]);
        store.zero_grads();
        assert_eq!(store.grad(b).sum(), 0.0);
    }
}
