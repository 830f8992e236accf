use super::graph::{Graph, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as batch-norm running statistics are stored but never
    /// updated by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named parameters owned by one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
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

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Replace every tensor with the one of the same name in `other`,
    /// checking names and shapes line up exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> crate::Result<()> {
        if other.len() != self.len() {
            return Err(crate::Error::Load(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other.entries()) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(crate::Error::Load(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// Parameters of one store bound as leaves of a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn bind(g: &mut Graph, store: &ParamStore, train: bool) -> Self {
        let vars = store
            .entries()
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), train && e.trainable))
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
