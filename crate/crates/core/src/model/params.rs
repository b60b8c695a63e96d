//! Named parameter storage and per-forward binding.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::seed::{name_hash, split_seed};
use crate::tensor::{Float, Init, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a freshly built parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// He normal for the given fan-in, multiplied by `scale`.
    He {
        fan_in: usize,
        scale: f64,
    },
    Zeros,
}

/// Ordered, uniquely named parameter tensors.
///
/// Initial values depend only on `(seed, name)`, so adding a parameter never
/// changes the draws of the others.
#[derive(Clone)]
pub struct ParamStore<T> {
    seed: u64,
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
}

impl<T> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ParamStore({} tensors, seed {})",
            self.values.len(),
            self.seed
        )
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: WeightInit,
    ) -> Result<ParamId, ModelError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(ModelError::InvalidConfig(format!(
                "duplicate parameter name {name}"
            )));
        }
        let seed = split_seed(self.seed, name_hash(&name));
        let value = match init {
            WeightInit::Zeros => Tensor::create(shape, Init::Zeros)?,
            WeightInit::He { fan_in, scale } => {
                let t = Tensor::create(shape, Init::HeNormal { seed, fan_in })?;
                if scale == 1.0 {
                    t
                } else {
                    t.map(|v| v * T::of(scale))
                }
            }
        };
        self.names.push(name);
        self.values.push(Rc::new(value));
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), ModelError> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(ModelError::InvalidConfig(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                cur.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    /// Zeroes every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if pred(name) {
                *v = Rc::new(Tensor::zeros(v.shape()));
                n += 1;
            }
        }
        n
    }

    /// Binds every parameter as a tape leaf (training) or constant (inference).
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bound<T> {
        let vars = self
            .values
            .iter()
            .map(|v| match tape {
                Some(t) => t.leaf_rc(Rc::clone(v)),
                None => Var::constant_rc(Rc::clone(v)),
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }
}

/// Parameters of a store bound for one forward pass.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Float> Bound<T> {
    /// Wraps externally created variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}
