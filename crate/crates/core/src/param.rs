//! Named trainable parameters and the ordered set the model owns.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer routing class. Matrix parameters go to Muon in the hybrid
/// scheme; everything scalar-like (embeddings, the lm head, norm gains,
/// per-head gate projections, modulation scalars) goes to AdamW.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Matrix,
    ScalarLike,
}

impl ShapeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeClass::Matrix => "matrix",
            ShapeClass::ScalarLike => "scalar_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(ShapeClass::Matrix),
            "scalar_like" => Ok(ShapeClass::ScalarLike),
            other => Err(CoreError::Config(format!("unknown shape class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub class: ShapeClass,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>, class: ShapeClass) -> Result<Self> {
        let name = name.into();
        if class == ShapeClass::Matrix && value.ndim() != 2 {
            return Err(CoreError::Config(format!(
                "parameter '{name}' is classified Matrix but has {} axes",
                value.ndim()
            )));
        }
        let grad = Tensor::zeros(value.shape());
        Ok(Self { name, value, grad, class })
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<F>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(CoreError::Contract(format!(
                "gradient shape {:?} != value shape {:?} for '{}'",
                g.shape(),
                self.value.shape(),
                self.name
            )));
        }
        self.grad = self.grad.add(g)?;
        Ok(())
    }
}

/// Ordered parameter collection; the order is the binding/serialization order
/// and is identical across runs with the same config.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, param: Parameter<F>) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(CoreError::Config(format!("duplicate parameter '{}'", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<F> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<F> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter as a leaf in `graph`, in set order.
    pub fn bind(&self, graph: &Graph<F>) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|p| graph.leaf(p.value.clone())).collect() }
    }

    /// Pull gradients out of a backward pass and accumulate them.
    pub fn accumulate_from(&mut self, bound: &BoundParams, grads: &Gradients<F>) -> Result<()> {
        for (i, var) in bound.vars.iter().enumerate() {
            if let Some(g) = grads.get(*var) {
                self.params[i].accumulate_grad(&g.clone())?;
            }
        }
        Ok(())
    }
}

/// Graph variables for one binding of a ParamSet, aligned with set order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wrap leaves created elsewhere (e.g. by the gradient checker); order
    /// must match the ParamSet the model was built with.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
