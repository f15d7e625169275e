//! Named parameter storage shared by the denoiser, the optimizer and the
//! checkpoint container. Insertion order is stable so checkpoints and
//! gradient reports are reproducible.

use std::collections::HashMap;

use crate::graph::{Graph, Var};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, t));
        id
    }

    /// Gaussian-initialized parameter on a stream derived from the name, so
    /// init is independent of registration order.
    pub fn insert_randn(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, seed: u64) -> usize {
        let name = name.into();
        let mut stream = Stream::new(seed, name_stream(&name));
        let t = Tensor::randn(rows, cols, F::c(std), &mut stream);
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: F) -> usize {
        self.insert(name, Tensor::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<F> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor<F>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.cast::<G>());
        }
        out
    }

    /// Register every parameter as a graph leaf; index by parameter id.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        let vars = self.entries.iter().enumerate().map(|(id, (_, t))| g.param(id, t.clone())).collect();
        Binding { vars }
    }
}

/// Graph handles for one bound parameter set.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Stable stream id derived from a parameter name (FNV-1a).
pub fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Linear layer stored as `w: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.insert_randn(format!("{name}.w"), fan_in, fan_out, std, seed);
        let b = store.insert_zeros(format!("{name}.b"), 1, fan_out);
        Linear { w, b }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var) -> Var {
        let y = g.matmul(x, bind.var(self.w));
        g.add_row(y, bind.var(self.b))
    }
}

/// Layer-norm affine pair; gamma starts at one, beta at zero.
#[derive(Clone, Copy, Debug)]
pub struct NormAffine {
    pub gamma: usize,
    pub beta: usize,
}

impl NormAffine {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        let gamma = store.insert_filled(format!("{name}.gamma"), 1, width, F::one());
        let beta = store.insert_zeros(format!("{name}.beta"), 1, width);
        NormAffine { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var) -> Var {
        g.layer_norm(x, bind.var(self.gamma), bind.var(self.beta))
    }
}
