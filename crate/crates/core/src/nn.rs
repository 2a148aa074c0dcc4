//! Parameter storage and the small layers shared by every module.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Result, VatError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.trainable = trainable;
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every parameter must be covered.
    pub fn load<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = lookup(&p.name)
                .ok_or_else(|| VatError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(VatError::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Glorot-uniform initialisation.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

/// He-normal initialisation for layers followed by ReLU.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Normal with standard deviation `std`, resampled outside two standard deviations.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            xavier(&[in_dim, out_dim], in_dim, out_dim, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.linear(x, g.param(self.weight), self.bias.map(|b| g.param(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, g.param(self.gamma), g.param(self.beta))
    }
}

/// Runs `f` on a gradient-free graph bound to `params` and returns the value.
pub fn eval_with(params: &ParamSet, f: impl FnOnce(&Graph) -> Result<Var>) -> Result<Tensor> {
    let g = Graph::with_params(params, false);
    let out = f(&g)?;
    Ok(g.value(out).as_ref().clone())
}
