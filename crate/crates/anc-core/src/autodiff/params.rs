use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

use super::{NodeId, Tape};

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub value: DenseTensor,
    pub grad: DenseTensor,
    pub requires_grad: bool,
}

impl Variable {
    pub fn new(name: impl Into<String>, value: DenseTensor) -> Self {
        let grad = DenseTensor::zeros(value.dims()).expect("value dims are valid");
        Variable {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = DenseTensor::zeros(self.value.dims()).expect("value dims are valid");
    }
}

/// Ordered collection of the model's learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    vars: Vec<Variable>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its position.
    pub fn push(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.vars.push(Variable::new(name, value));
        Ok(self.vars.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Variable> {
        self.vars.iter()
    }

    pub fn get(&self, i: usize) -> &Variable {
        &self.vars[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Variable {
        &mut self.vars[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Variable> {
        self.vars.iter().find(|v| v.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.vars.iter().map(|v| v.value.len()).sum()
    }

    /// Records every parameter as a leaf of `tape`, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.vars
            .iter()
            .map(|v| tape.leaf(v.value.clone(), v.requires_grad))
            .collect()
    }

    /// Adds the tape's gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, nodes: &[NodeId]) -> Result<()> {
        if nodes.len() != self.vars.len() {
            return Err(invalid!(
                "{} bound nodes for {} parameters",
                nodes.len(),
                self.vars.len()
            ));
        }
        for (v, &n) in self.vars.iter_mut().zip(nodes) {
            let g = tape.grad(n)?;
            let sum = v
                .grad
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + b)
                .collect();
            v.grad = DenseTensor::new(v.value.dims(), sum)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.vars.iter_mut().for_each(Variable::zero_grad);
    }
}
