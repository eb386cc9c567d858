//! Named parameter tensors and their binding into a graph.

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::rng::Rng;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. the fixed memory addresses) are stored and checkpointed
    /// but never differentiated or updated.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Graph handles for every entry of a [`ParamStore`], valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
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
        Bound { vars }
    }

    /// Binds trainable entries to the given leaves, in entry order, and
    /// buffers as constants.
    pub fn bind_with(&self, g: &mut Graph, trainable: &[Var]) -> Bound {
        let mut it = trainable.iter();
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    *it.next().expect("one leaf per trainable entry")
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Zero tensors shaped like every entry.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect()
    }

    /// Adds the gradients of one graph into `acc` (one tensor per entry).
    pub fn accumulate(&self, bound: &Bound, grads: &Gradients, acc: &mut [Tensor], scale: f64) {
        for (i, e) in self.entries.iter().enumerate() {
            if !e.trainable {
                continue;
            }
            if let Some(g) = grads.get_data(bound.vars[i]) {
                for (a, &v) in acc[i].data_mut().iter_mut().zip(g) {
                    *a += scale * v;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// `Uniform(±√(6 / (fan_in + fan_out)))` matrix of shape `fan_in × fan_out`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}
