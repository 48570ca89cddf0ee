use crate::float::Float;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (batch-norm running statistics) are stored alongside weights
    /// but bound as constants.
    pub trainable: bool,
}

/// Ordered collection of named tensors making up a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Float = f32> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if `name` is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Places every entry on `tape`: trainable entries as differentiable
    /// leaves, buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] placed on a tape for one step.
#[derive(Debug, Clone)]
pub struct Bound<'t, F: Float = f32> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Float> Bound<'t, F> {
    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    /// Gradient for each entry of the store, in order; `None` for buffers.
    /// Trainable entries the loss does not reach get zeros.
    pub fn grads(&self, store: &ParamStore<F>, grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars
            .iter()
            .zip(store.entries())
            .map(|(v, e)| e.trainable.then(|| grads.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_bind_as_constants() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::ones(&[2]), true);
        let r = store.add("running", Tensor::ones(&[2]), false);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        assert!(bound.var(w).requires_grad());
        assert!(!bound.var(r).requires_grad());
        let loss = bound.var(w).mul(&bound.var(r)).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = bound.grads(&store, &grads);
        assert_eq!(g[0].as_ref().unwrap().data(), &[1.0, 1.0]);
        assert!(g[1].is_none());
        assert_eq!(store.trainable_scalars(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1]), true);
        store.add("a", Tensor::zeros(&[1]), true);
    }
}
