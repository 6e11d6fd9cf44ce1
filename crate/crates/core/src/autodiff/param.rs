use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter. Clones of a parameter share it,
/// so two uses inside one graph resolve to the same leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor owned by a layer.
///
/// Buffers (batch-norm running statistics) are stored alongside trainable
/// weights so they serialize with the model, but never receive gradients.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    id: ParamId,
    buffer: bool,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            id: ParamId::fresh(),
            buffer: false,
            tensor: tensor.with_requires_grad(true),
        }
    }

    pub fn buffer(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            id: ParamId::fresh(),
            buffer: true,
            tensor: tensor.with_requires_grad(false),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_buffer(&self) -> bool {
        self.buffer
    }

    pub fn is_frozen(&self) -> bool {
        !self.buffer && !self.tensor.requires_grad()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if !self.buffer {
            self.tensor.set_requires_grad(!frozen);
        }
    }

    /// Overwrites the values in place, keeping the name, identity and frozen
    /// state. Shapes must match exactly.
    pub fn assign(&mut self, values: &Tensor) -> Result<()> {
        if values.shape() != self.tensor.shape() {
            return Err(Error::shape(
                "assign",
                format!("`{}` is {:?}, got {:?}", self.name, self.tensor.shape(), values.shape()),
            ));
        }
        self.tensor.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    /// Gives this parameter a new identity; used when a deep copy must not
    /// alias the original inside a graph.
    pub fn reidentify(&mut self) {
        self.id = ParamId::fresh();
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn parameter_names(&self) -> Vec<String> {
        self.parameters().iter().map(|p| p.name().to_string()).collect()
    }

    /// Number of scalar values across trainable parameters and buffers.
    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.tensor.zero_grad());
    }

    fn set_all_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |p| p.set_frozen(frozen));
    }

    /// Adds gradients computed by `graph.backward` into the parameters'
    /// gradient buffers, and applies any buffer updates recorded during the
    /// forward pass.
    fn absorb(&mut self, graph: &super::Graph) {
        self.visit_mut(&mut |p| {
            if let Some(values) = graph.buffer_update(p.id()) {
                p.tensor.data_mut().copy_from_slice(values);
            }
            if let Some(g) = graph.param_grad(p.id()) {
                p.tensor.accumulate_grad(g);
            }
        });
    }

    /// Little-endian byte image of every parameter and buffer, in visit order.
    fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }
}
