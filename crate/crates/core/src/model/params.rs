use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};

/// Coarse parameter families, used for warm starts and gradient coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Decoder,
    Embedding,
    TextHead,
    Prenet,
    Postnet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Projection,
        ParamGroup::Decoder,
        ParamGroup::Embedding,
        ParamGroup::TextHead,
        ParamGroup::Prenet,
        ParamGroup::Postnet,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projection => "proj",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Embedding => "embed",
            ParamGroup::TextHead => "text_head",
            ParamGroup::Prenet => "prenet",
            ParamGroup::Postnet => "postnet",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if ParamGroup::of(&name).is_none() {
            return Err(Error::invalid(format!("parameter {name:?} belongs to no known group")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
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

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.id(name)?])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        if value.shape() != self.tensors[id].shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: self.tensors[id].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id] = value;
        Ok(())
    }

    /// Registers (or reuses) the parameter as a leaf of `g`.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self.id(name)?;
        g.param(id, &self.tensors[id])
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.len()).filter(|&i| ParamGroup::of(&self.names[i]) == Some(group)).collect()
    }

    /// Copies every tensor of `groups` from `other`; names and shapes must match.
    pub fn copy_groups_from(&mut self, other: &ParamStore<T>, groups: &[ParamGroup]) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.len() {
            let in_scope = ParamGroup::of(&self.names[i]).is_some_and(|g| groups.contains(&g));
            if !in_scope {
                continue;
            }
            let src = other.get(&self.names[i])?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "warm start",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.tensors[i] = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_and_lookup() {
        let mut p = ParamStore::<f64>::new();
        p.insert("encoder.a", Tensor::zeros(vec![2, 3])).unwrap();
        p.insert("postnet.b", Tensor::zeros(vec![4])).unwrap();
        assert!(p.insert("encoder.a", Tensor::zeros(vec![1])).is_err());
        assert!(p.insert("mystery.c", Tensor::zeros(vec![1])).is_err());
        assert_eq!(p.count(), 10);
        assert_eq!(p.group_ids(ParamGroup::Postnet), vec![1]);
        assert!(p.set("encoder.a", Tensor::zeros(vec![3, 2])).is_err());
    }
}
