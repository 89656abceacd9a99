//! Named parameter storage and the per-forward binding context.
//!
//! Parameters live in a [`ParamStore`] as plain `f64` buffers owned by the
//! model and mutated only by the optimizer. Each forward pass runs on a
//! fresh tape: a [`Forward`] context lazily copies each parameter the pass
//! actually touches onto the tape as a gradient-carrying leaf and remembers
//! the binding, so gradients can be read back per parameter after
//! `backward`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{Tape, TensorError, TensorId};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable tensors of a model, in a stable registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor and returns its handle.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter shape/data mismatch");
        self.params.push(Param { name: name.into(), shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Tape plus parameter bindings for a single forward pass.
pub struct Forward<'a> {
    pub tape: Tape<f64>,
    store: &'a ParamStore,
    bound: Vec<Option<TensorId>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Forward { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    /// Tape id of a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Result<TensorId, TensorError> {
        if let Some(t) = self.bound[id.0] {
            return Ok(t);
        }
        let p = self.store.get(id);
        let t = self.tape.leaf(p.data.clone(), p.shape.clone(), true)?;
        self.bound[id.0] = Some(t);
        Ok(t)
    }

    /// Binding of a parameter, if this pass touched it.
    pub fn binding(&self, id: ParamId) -> Option<TensorId> {
        self.bound[id.0]
    }

    /// Gradient of a parameter after `backward`, zeros if untouched.
    pub fn grad_of(&self, id: ParamId) -> Vec<f64> {
        match self.bound[id.0].and_then(|t| self.tape.grad(t)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.store.get(id).data.len()],
        }
    }
}

/// Deterministic initializer: one seeded generator per network branch, so a
/// branch's draws do not depend on which other branches a configuration
/// instantiates.
pub struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    pub fn branch(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Init { rng }
    }

    /// Centered uniform with a fan-in scaled half-width, the usual choice
    /// ahead of ReLU.
    pub fn fan_in_uniform(
        &mut self,
        store: &mut ParamStore,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
    ) -> ParamId {
        let limit = (6.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.gen_range(-limit..limit)).collect();
        store.add(name, shape, data)
    }

    /// Uniform in `[-half, half)`.
    pub fn uniform(
        &mut self,
        store: &mut ParamStore,
        name: impl Into<String>,
        shape: Vec<usize>,
        half: f64,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.gen_range(-half..half)).collect();
        store.add(name, shape, data)
    }

    /// Constant fill (for norm affines and biases).
    pub fn constant(
        store: &mut ParamStore,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: f64,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        store.add(name, shape, vec![value; numel])
    }
}
