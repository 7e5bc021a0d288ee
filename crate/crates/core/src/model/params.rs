use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    /// Adds a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites parameters from `(name, tensor)` pairs. Every parameter must
    /// be supplied exactly once with a matching shape.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}` for this architecture")))?;
            if seen[id.0] {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
            if tensor.shape() != self.tensors[id.0].shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    tensor.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            seen[id.0] = true;
            self.tensors[id.0] = tensor;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("checkpoint is missing tensor `{}`", self.names[i])));
        }
        Ok(())
    }
}

/// Tape handles of a registered [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
