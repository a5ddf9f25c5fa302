use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named parameters (and non-trainable buffers such as batch-norm running
/// statistics). Iteration is in name order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tensors: Vec<DiffTensor>,
    names: Vec<String>,
    by_name: BTreeMap<String, ParamId>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
            by_name: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    fn insert(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(DiffTensor {
            value,
            grad: None,
            requires_grad,
        });
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a trainable tensor with explicit initial values.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Register a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Register a trainable tensor drawn from `uniform(-bound, bound)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&DiffTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(name, id)` pairs sorted by name.
    pub fn iter_ids(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.tensors[id.0]))
    }

    /// Set every trainable gradient to zeros.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                match &mut t.grad {
                    Some(g) => g.fill(0.0),
                    None => t.grad = Some(Tensor::zeros(t.value.shape())),
                }
            }
        }
    }

    /// Add `grad` into the accumulated gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if grad.shape() != t.value.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{:?} vs {:?}", grad.shape(), t.value.shape()),
            ));
        }
        match &mut t.grad {
            Some(g) => g.add_assign(grad),
            None => t.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Replace the value of an existing tensor, checking its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if value.shape() != t.value.shape() {
            return Err(Error::shape(
                "set_value",
                format!(
                    "`{}`: {:?} vs {:?}",
                    self.names[id.0],
                    value.shape(),
                    t.value.shape()
                ),
            ));
        }
        t.value = value;
        Ok(())
    }

    /// Copy every value out, in id order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| t.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (t, v) in self.tensors.iter_mut().zip(snapshot) {
            t.value = v.clone();
        }
    }
}
