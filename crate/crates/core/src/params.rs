//! Named parameter storage.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Gradients, Tape, Var};

/// Learnable arrays addressed by hierarchical dotted names, kept in
/// insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; panics on a duplicate name (a construction bug).
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::UnknownParam(name.into())),
        }
    }

    pub fn set(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[DenseArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseArray] {
        &mut self.values
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Records every parameter as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Gain of projections that feed a residual sum. Every stage adds its
    /// output to its input, so unit gains compound across stages.
    pub const RESIDUAL_GAIN: f64 = 0.25;

    /// Xavier-uniform `[fan_in, fan_out]` matrix scaled by `gain`.
    pub fn insert_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, gain: f64, rng: &mut SeededRng) {
        let a = gain * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
        self.insert(name, DenseArray::from_vec(&[fan_in, fan_out], data).expect("xavier shape"));
    }
}

/// Parameters of a [`ParamStore`] as recorded on one tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Pairs `store`'s names with vars already on a tape (one per parameter,
    /// in store order).
    pub fn from_vars(store: &'a ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::config(format!(
                "expected {} parameter vars, got {}",
                store.len(),
                vars.len()
            )));
        }
        Ok(Self { store, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    /// `var(prefix + "." + leaf)`.
    pub fn sub(&self, prefix: &str, leaf: &str) -> Result<Var> {
        self.var(&format!("{prefix}.{leaf}"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order, zeros for parameters off the loss path.
    pub fn gradients(&self, grads: &Gradients) -> Vec<DenseArray> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
