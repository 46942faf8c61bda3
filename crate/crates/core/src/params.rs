//! Named parameter store shared by encoders, the projection head, and the
//! loss scalars. Entries keep a stable order, which fixes the optimizer
//! update order and makes runs reproducible.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Graph, NodeId};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    /// Running statistics and other buffers are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        self.entries.len() - 1
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound));
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> usize {
        self.add(name, ArrayD::zeros(IxDyn(shape)), trainable)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> usize {
        self.add(name, ArrayD::from_elem(IxDyn(shape), 1.0), trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value(&self, idx: usize) -> &Arr {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Arr {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Create one graph leaf per entry; trainable entries get gradients.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let node_of = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.leaf(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        BoundParams { node_of }
    }
}

/// Per-graph mapping from store indices to leaf nodes.
pub struct BoundParams {
    node_of: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, idx: usize) -> NodeId {
        self.node_of[idx]
    }

    /// Collect d(loss)/d(param) for every trainable entry, zeros where a
    /// parameter did not participate in the graph.
    pub fn gradients(&self, g: &Graph, store: &ParamStore) -> Vec<Arr> {
        (0..store.len())
            .map(|i| match g.grad(self.node_of[i]) {
                Some(gr) => gr.clone(),
                None => ArrayD::zeros(store.value(i).raw_dim()),
            })
            .collect()
    }
}
