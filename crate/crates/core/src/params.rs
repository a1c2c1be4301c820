//! Named trainable tensors shared by every layer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::manifold::BallParams;
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a parameter lives in Euclidean space or on the Poincaré ball.
///
/// Ball parameters are re-projected after every optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Euclidean,
    Ball,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of parameters. Registration order is stable, so a
/// model rebuilt from the same config maps every [`ParamId`] to the same
/// entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Half-width of the uniform range used for weight initialization.
pub const INIT_RANGE: f64 = 0.05;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    /// Weight with entries drawn from U(-INIT_RANGE, INIT_RANGE).
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-INIT_RANGE..INIT_RANGE));
        self.add(name, t, ParamKind::Euclidean)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), ParamKind::Euclidean)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shapes("param_set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copy every value from `other`, matching entries by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(alloc::format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Config(alloc::format!("checkpoint is missing parameter {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::shapes("load_params", e.value.shape(), src.value.shape()));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    /// Rescale every ball parameter row back inside the ball.
    pub fn project_ball_params(&mut self, ball: &BallParams) {
        for e in self.entries.iter_mut().filter(|e| e.kind == ParamKind::Ball) {
            let n = *e.value.shape().last().unwrap_or(&1);
            for row in e.value.data_mut().chunks_exact_mut(n) {
                ball.project_row(row);
            }
        }
    }

    /// Largest row norm over all ball parameters.
    pub fn max_ball_param_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Ball)
            .flat_map(|e| e.value.rows())
            .map(|r| libm::sqrt(r.iter().map(|x| x * x).sum::<f64>()))
            .fold(0.0, f64::max)
    }
}
