//! Minimal dense-array substrate with reverse-mode differentiation.
//!
//! Everything is `f64`. A [`Graph`] is built eagerly: every operation
//! computes its value immediately and records its inputs, so the node list
//! doubles as a topological order for [`Graph::backward`].
//!
//! ```
//! use contour_marl::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{decode_tensors, encode_tensors, load_tensors, save_tensors, CHECKPOINT_VERSION};
pub use gradcheck::{central_difference, grad_check, grad_check_detail, relative_error, WorstElement};
pub use graph::{inject_fault, Axis, Gradients, Graph, NodeId, OpKind, EXP_INPUT_MAX};
pub use optim::{cosine_lr, AdamW};
pub use tensor::Tensor;

pub(crate) use graph::softplus;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("slice [{start}, {start}+{len}) out of range for shape {shape:?}")]
    SliceOutOfRange {
        shape: (usize, usize),
        start: usize,
        len: usize,
    },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| graph.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant leaf (no gradient tracking).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| graph.constant(t.clone())).collect()
    }

    /// Named entries with `prefix` prepended, for checkpointing.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every entry from `source` (looked up as `prefix + name`),
    /// checking shapes.
    pub fn load_prefixed(&mut self, prefix: &str, source: &[(String, Tensor)]) -> Result<(), DiffError> {
        for (name, tensor) in &mut self.entries {
            let key = format!("{prefix}{name}");
            let found = source
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| DiffError::MissingParam(key.clone()))?;
            if found.1.shape() != tensor.shape() {
                return Err(DiffError::ParamShape {
                    name: key,
                    found: found.1.shape().to_vec(),
                    expected: tensor.shape().to_vec(),
                });
            }
            *tensor = found.1.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests;
