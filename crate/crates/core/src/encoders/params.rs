use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    /// Glorot-uniform matrix.
    pub fn add_matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let n = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::row(vec![value; cols]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of every parameter with the matching name in
    /// `other`. Shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize, TensorError> {
        let mut n = 0;
        for (id, name, t) in other.iter() {
            let _ = id;
            if let Some(mine) = self.id(name) {
                let dst = &mut self.tensors[mine.0];
                if dst.shape() != t.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_matching",
                        left: dst.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                dst.data_mut().copy_from_slice(t.data());
                n += 1;
            }
        }
        Ok(n)
    }
}

/// One forward (and optionally backward) pass over a parameter store.
/// Parameters are bound to the graph lazily, so a parameter never read by
/// the forward pass has no gradient.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Option<&'a [bool]>,
    track: bool,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    /// Inference session: no gradients, no dropout.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: None,
            track: false,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training session. `trainable[i]` false freezes parameter `i`.
    pub fn train(store: &'a ParamStore, trainable: Option<&'a [bool]>, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
            track: true,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.track && self.trainable.is_none_or(|t| t[id.0]);
        let v = self.graph.leaf(self.store.get(id).clone().with_requires_grad(rg));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => self.graph.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }

    /// Gradients for every bound trainable parameter, indexed by `ParamId`.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }
}
