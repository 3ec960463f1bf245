//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Same names, new values (shapes must match).
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<ParamStore> {
        if values.len() != self.values.len()
            || values
                .iter()
                .zip(&self.values)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape(
                "param_store",
                "replacement values do not match the store layout",
            ));
        }
        Ok(ParamStore {
            names: self.names.clone(),
            values,
        })
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from a snapshot; names and shapes must match exactly.
    pub fn load_snapshot(&mut self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        if snap.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, model expects {}",
                snap.len(),
                self.names.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = snap
                .get(name)
                .ok_or_else(|| Error::Contract(format!("snapshot lacks parameter `{name}`")))?;
            if t.shape() != value.shape() {
                return Err(Error::shape(
                    "load_snapshot",
                    format!(
                        "`{name}`: expected {:?}, found {:?}",
                        value.shape(),
                        t.shape()
                    ),
                ));
            }
            *value = t.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Seeded inverted-dropout masks.
pub struct Dropout {
    pub p: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout {
            p,
            rng: RefCell::new(rng),
        }
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let mut rng = self.rng.borrow_mut();
        let shape = x.shape();
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        x.mul_const(Rc::new(Tensor::new(shape, mask)?))
    }
}

/// A [`ParamStore`] bound onto a tape for one pass.
///
/// Parameters become leaves lazily on first use. Frozen bindings produce
/// constants, so no gradient ever reaches them.
pub struct Bound<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    dropout: Option<&'t Dropout>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, trainable: bool) -> Self {
        Bound {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
            dropout: None,
        }
    }

    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::new(tape, store, false)
    }

    pub fn with_dropout(mut self, dropout: &'t Dropout) -> Self {
        self.dropout = Some(dropout);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self.dropout {
            Some(d) => d.apply(x),
            None => Ok(x),
        }
    }

    /// Gradient for one parameter (zeros if unused in this pass).
    pub fn grad_of(&self, id: ParamId, grads: &Gradients) -> Tensor {
        match self.vars.borrow()[id.0] {
            Some(v) => grads.get_or_zeros(v),
            None => Tensor::zeros(self.store.get(id).shape()),
        }
    }

    /// Gradients for every parameter that was bound in this pass.
    pub fn grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), grads.get_or_zeros(v))))
            .collect()
    }
}
