//! Named parameter storage.
//!
//! Modules keep [`ParamId`] handles into a [`ParamStore`]; a forward pass
//! binds the whole store onto a tape once and looks variables up by id.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(NamedTensor { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    /// Replaces values from a list with identical names and shapes.
    pub fn load(&mut self, entries: &[NamedTensor]) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::Shape(alloc::format!(
                "parameter count {} vs {}",
                entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(alloc::format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
