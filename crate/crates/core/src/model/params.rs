use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `other`, matching by name and shape.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} parameters supplied, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (name, t) in other.iter() {
            let slot = self
                .by_name_mut(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn bind(store: &ParamStore, tape: &'t Tape) -> Self {
        BoundParams {
            vars: store.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Wraps existing vars, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Initialisation helpers; all draws come from one generator in parameter
/// creation order.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// `[fan_in, fan_out]` weight, uniform in `±1/√fan_in`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store.insert(name, t)
    }
}

/// Gain and bias of a layer norm.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, prefix: &str, dim: usize) -> Self {
        Norm {
            gain: init.constant(&format!("{prefix}.gain"), &[dim], 1.0),
            bias: init.constant(&format!("{prefix}.bias"), &[dim], 0.0),
        }
    }

    pub fn apply<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias))
    }
}
