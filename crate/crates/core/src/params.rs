//! Named parameter storage and the per-forward binding context.

use indexmap::IndexMap;

use crate::error::{LitError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Ordered map from hierarchical names (`stage2.merge.conv.weight`) to tensors.
///
/// Learnable parameters carry `requires_grad`; non-learnable buffers (batch-norm running
/// statistics) do not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(LitError::config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        self.insert(name, tensor.with_grad())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<F>) -> Result<()> {
        tensor.requires_grad = false;
        self.insert(name, tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries.get(name).ok_or_else(|| LitError::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries.get_mut(name).ok_or_else(|| LitError::State(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.entries.values().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Overwrite values of existing entries by name; shapes must match.
    pub fn load_values(&mut self, values: impl IntoIterator<Item = (String, Tensor<F>)>) -> Result<()> {
        for (name, t) in values {
            let dst = self.get_mut(&name)?;
            if dst.shape() != t.shape() {
                return Err(LitError::Format(format!(
                    "{name}: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm, applied after forward.
#[derive(Clone, Debug)]
pub struct BufferUpdate<F> {
    pub name: String,
    pub value: Vec<F>,
}

/// What a forward pass should retain for inspection.
#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub attention: bool,
    pub offsets: bool,
}

/// One forward computation: owns its tape and binds store parameters to tape leaves on first use.
pub struct Forward<'a, F> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: IndexMap<String, Var>,
    pub mode: Mode,
    grad_enabled: bool,
    pub capture: Capture,
    pub attention: Vec<(String, Tensor<F>)>,
    pub offsets: Vec<(String, Tensor<F>)>,
    pub buffer_updates: Vec<BufferUpdate<F>>,
}

impl<'a, F: Real> Forward<'a, F> {
    pub fn new(store: &'a ParamStore<F>, mode: Mode, grad_enabled: bool) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
            mode,
            grad_enabled,
            capture: Capture::default(),
            attention: Vec::new(),
            offsets: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_capture(mut self, capture: Capture) -> Self {
        self.capture = capture;
        self
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    /// Tape leaf for a stored parameter, created once per forward.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = self.tape.leaf_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad && self.grad_enabled);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<F>> {
        self.store.get(name)
    }

    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.tape.leaf(t)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound learnable parameter, by name (zeros where none reached it).
    pub fn param_grads(&self) -> IndexMap<String, Vec<F>> {
        let mut out = IndexMap::new();
        for (name, &v) in &self.bound {
            let t = self.store.get(name).expect("bound names exist");
            if !t.requires_grad {
                continue;
            }
            let g = self.tape.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::ZERO; t.numel()]);
            out.insert(name.clone(), g);
        }
        out
    }
}
