use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}
