//! Named parameter storage and gradient records.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The three parameter families of the CVAE: prior/encoder (`theta`),
/// recognition (`phi`) and decoder (`psi`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Theta,
    Phi,
    Psi,
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Theta => "theta",
            GroupLabel::Phi => "phi",
            GroupLabel::Psi => "psi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theta" => Some(GroupLabel::Theta),
            "phi" => Some(GroupLabel::Phi),
            "psi" => Some(GroupLabel::Psi),
            _ => None,
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
}

/// Flat, insertion-ordered collection of named matrices.
///
/// Names are slash-separated paths whose first segment is the group label,
/// e.g. `theta/Pedestrian/history/lstm/w_ih`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{name}`")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("parameter `{name}` has non-finite values")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> Option<GroupLabel> {
        self.name(id).split('/').next().and_then(GroupLabel::parse)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrite the value stored under `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter name `{name}`")))?;
        let current = &mut self.entries[id.0].value;
        if current.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint stores {:?}",
                current.dim(),
                value.dim()
            )));
        }
        *current = value;
        Ok(())
    }

    /// Copy of the subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.insert(e.name.clone(), e.value.clone()).expect("names are unique");
        }
        out
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradRecord {
    grads: Vec<Matrix>,
}

impl GradRecord {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.entries().iter().map(|e| Matrix::zeros(e.value.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &GradRecord) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }
}
