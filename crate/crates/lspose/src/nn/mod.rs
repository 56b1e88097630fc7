//! Minimal reverse-mode autodiff for the pose networks.
//!
//! The graph is define-by-run and built per sample: forward values are
//! computed eagerly as nodes are added, and a single backward sweep in
//! reverse creation order routes gradients to inputs and into a
//! [`ParamGrads`] accumulator. Everything is f64; batches are handled by
//! running one graph per sample and averaging the accumulated gradients.

pub mod graph;
pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical shape of a named parameter tensor. Data is always stored as a
/// flat row-major f64 buffer; the shape says how ops interpret it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamShape {
    /// Convolution kernel (out_c, in_c, kh, kw).
    Conv {
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
    },
    /// Dense layer weight (out_n, in_n).
    Linear { out_n: usize, in_n: usize },
    /// Per-channel vector (bias, gain, shift) of length n.
    Vector { n: usize },
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Conv {
                out_c,
                in_c,
                kh,
                kw,
            } => out_c * in_c * kh * kw,
            ParamShape::Linear { out_n, in_n } => out_n * in_n,
            ParamShape::Vector { n } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named parameter tensor with flat f64 storage.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: ParamShape,
    pub data: Vec<f64>,
}

/// Stable handle into a [`ParamStore`].
pub type ParamId = usize;

/// Ordered collection of named parameters. Creation order is fixed by
/// the model builder, so ids are stable for a given configuration and
/// the store can be serialized as an ordered list.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, shape: ParamShape, data: Vec<f64>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "parameter {name}: data length {} does not match shape length {}",
                data.len(),
                shape.len()
            )));
        }
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// True if any parameter holds a non-finite value; returns the first
    /// offending name.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`]. A slot is
/// allocated lazily the first time backward touches that parameter, so
/// untouched parameters are structurally distinguishable from parameters
/// that received an all-zero gradient.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    slots: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_for(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    /// Mutable flat gradient buffer for a parameter, allocating on first
    /// touch.
    pub fn slot_mut(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        let slot = &mut self.slots[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }

    /// Gradient buffer if this parameter was touched by any backward pass.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id].as_deref()
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.slots[id].is_some()
    }

    /// Scales every accumulated gradient (used for batch averaging).
    pub fn scale(&mut self, k: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= k;
            }
        }
    }

    /// Sum of squared entries over all touched slots.
    pub fn squared_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }

    /// First parameter id whose gradient holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.slots
            .iter()
            .enumerate()
            .find(|(_, s)| {
                s.as_ref()
                    .map(|v| v.iter().any(|x| !x.is_finite()))
                    .unwrap_or(false)
            })
            .map(|(i, _)| i)
    }
}
