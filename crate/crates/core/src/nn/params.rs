use std::collections::HashMap;

use crate::error::{Result, SonarError};
use crate::nn::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter buffers with gradient buffers of matching shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SonarError::InvalidConfig(format!(
                "duplicate parameter {name}"
            )));
        }
        let id = self.values.len();
        self.grads.push(Tensor2::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| SonarError::InvalidConfig(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor2> {
        Ok(self.get(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Tensor2] {
        &self.grads
    }

    pub fn values(&self) -> &[Tensor2] {
        &self.values
    }

    /// Parameter values and gradients side by side, for optimizers.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor2], &[Tensor2]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.as_mut_slice().fill(0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: &[Tensor2]) -> Result<()> {
        if grads.len() != self.grads.len() {
            return Err(SonarError::Shape(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.grads.len()
            )));
        }
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            if acc.shape() != g.shape() {
                return Err(SonarError::Shape("gradient shape mismatch".into()));
            }
            acc.add_assign(g);
        }
        Ok(())
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor2>) -> Result<()> {
        self.zero_grads();
        self.accumulate_grads(&grads)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor2::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a == b)
    }
}
