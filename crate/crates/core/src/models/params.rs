use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndiff::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Fixed entries (reservoir weights) are bound as constants and never
    /// touched by an optimizer.
    pub trainable: bool,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    frozen: bool,
}

/// Graph handles for a [`ParamSet`], index-aligned with its entries.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    /// Gradients in entry order; `None` for constants and unreached leaves.
    pub fn grads(&self, graph: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| graph.grad(*v).cloned()).collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.value)
    }

    /// Mutable access to a trainable or fixed entry; refused once frozen.
    pub fn get_mut(&mut self, slot: usize) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::Contract(format!(
                "parameter `{}` belongs to a frozen model",
                self.entries[slot].name
            )));
        }
        Ok(&mut self.entries[slot].value)
    }

    /// Replaces the entry called `name` with a same-shaped value.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named `{name}`")))?;
        let current = self.get_mut(slot)?;
        if current.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "`{name}` has shape {:?}, replacement has {:?}",
                current.shape(),
                value.shape()
            )));
        }
        *current = value;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable && !self.frozen {
                    graph.param(e.value.clone())
                } else {
                    graph.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Binds every entry as a constant, for inference.
    pub fn bind_constants(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| graph.constant(e.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Trainable values concatenated in entry order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Overwrites trainable values from a vector laid out like
    /// [`ParamSet::flat_trainable`].
    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::Dimension(format!(
                "expected {} trainable values, got {}",
                self.trainable_count(),
                flat.len()
            )));
        }
        if self.frozen {
            return Err(Error::Contract("cannot overwrite a frozen model".into()));
        }
        let mut at = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Replaces every value, keeping names and flags. Shapes must match.
    pub(crate) fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "payload has {} tensors, model has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?} in the model but {:?} in the payload",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `rows x cols` matrix with entries uniform in `±1/sqrt(cols)`.
pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}
