//! Named parameter storage and per-forward tape binding.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors. Registration order is the
/// canonical order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("param set", cur.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Overwrites values by name from `(name, tensor)` records. Every stored
    /// parameter must be supplied exactly once with a matching shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter records, found {}",
                self.values.len(),
                records.len()
            )));
        }
        let mut seen = vec![false; self.values.len()];
        for (name, t) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            if core::mem::replace(&mut seen[id.0], true) {
                return Err(Error::Contract(format!("parameter {name} given twice")));
            }
            self.set(id, t)?;
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .map(ToString::to_string)
            .zip(self.values.iter().cloned())
            .collect()
    }
}

/// Glorot/Xavier uniform initialisation.
pub fn xavier_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("xavier shape")
}

/// Binds parameters onto a fresh tape for one forward pass. Each parameter
/// becomes a leaf the first time it is requested; later requests reuse it.
pub struct Binder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients per parameter (indexed like the store); `None` for
    /// parameters that were never bound or received no gradient.
    pub fn gradients(&self) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.tape.grad_slice(v).map(<[f64]>::to_vec)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([2])).unwrap();
        assert!(s.add("w", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = xavier_uniform(&mut r1, &[4, 5], 4, 5);
        let b = xavier_uniform(&mut r2, &[4, 5], 4, 5);
        assert_eq!(a, b);
        let lim = (6.0f64 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn binder_reuses_leaves_and_collects_grads() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let _unused = s.add("u", Tensor::zeros([1])).unwrap();
        let mut b = Binder::new(&s, true);
        let v1 = b.param(w);
        let v2 = b.param(w);
        assert_eq!(v1, v2);
        let y = b.tape.mul(v1, v2).unwrap();
        let l = b.tape.sum_all(y);
        b.tape.backward(l).unwrap();
        let g = b.gradients();
        assert_eq!(g[0].as_deref(), Some(&[2.0, 4.0][..]));
        assert!(g[1].is_none());
    }
}
