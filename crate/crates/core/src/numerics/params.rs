use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Trainable weights get gradients; buffers (batch-norm running statistics) only get
/// momentum updates from training-mode forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: Role,
}

/// Named parameter table of one model. Names are dotted paths (`enc.res0.a.conv.w`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

/// Running-statistic update produced by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, role: Role) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            role,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, Role::Weight)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, Role::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn role(&self, id: ParamId) -> Role {
        self.params[id.0].role
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.role == Role::Weight)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Replaces the tensor behind `name`, keeping its shape contract.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::dim("param set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (r, b) in self.params[u.mean.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.params[u.var.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = keep * *r + m * *b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    role: p.role,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
