//! Named parameters and the small layer wrappers the blocks are assembled from.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Set every value whose name starts with `prefix` to zero.
    pub fn zero_values(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.data_mut().fill(0.0);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Add the gradients of a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }
}

/// Tape handles of a [`ParamStore`] bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use existing tape values as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Deterministic parameter factory.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::ones(shape))
    }
}

/// Affine map over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), &[c_in, c_out], c_in)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[c_out])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    pub fn numel(&self) -> usize {
        self.c_in * self.c_out + if self.bias.is_some() { self.c_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let mut conv = Self::without_bias(init, name, c_in, c_out, kernel, stride)?;
        conv.bias = Some(init.zeros(&format!("{name}.bias"), &[c_out])?);
        Ok(conv)
    }

    /// For convolutions feeding a normalization, which would cancel a bias.
    pub fn without_bias(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = init.weight(
            &format!("{name}.weight"),
            &[kernel, kernel, c_in, c_out],
            kernel * kernel * c_in,
        )?;
        Ok(Conv2d {
            weight,
            bias: None,
            kernel,
            stride,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let b = bias_or_zeros(tape, p, self.bias, self.c_out);
        tape.conv2d(x, p.var(self.weight), b, self.stride, Padding::Same)
    }

    pub fn numel(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out + if self.bias.is_some() { self.c_out } else { 0 }
    }
}

fn bias_or_zeros(tape: &mut Tape, p: &Bound, bias: Option<ParamId>, n: usize) -> Var {
    match bias {
        Some(b) => p.var(b),
        None => tape.constant(Tensor::zeros(&[n])),
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut dw = Self::without_bias(init, name, channels)?;
        dw.bias = Some(init.zeros(&format!("{name}.bias"), &[channels])?);
        Ok(dw)
    }

    pub fn without_bias(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), &[3, 3, channels], 9)?;
        Ok(DepthwiseConv {
            weight,
            bias: None,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let b = bias_or_zeros(tape, p, self.bias, self.channels);
        tape.depthwise3x3(x, p.var(self.weight), b)
    }

    pub fn numel(&self) -> usize {
        9 * self.channels + if self.bias.is_some() { self.channels } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Over the trailing (channel) axis of each token.
    Layer,
    /// Per channel over all spatial positions.
    Channel,
}

/// Normalization with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
    pub channels: usize,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, channels: usize, kind: NormKind) -> Result<Self> {
        let gamma = init.ones(&format!("{name}.gamma"), &[channels])?;
        let beta = init.zeros(&format!("{name}.beta"), &[channels])?;
        Ok(Norm {
            gamma,
            beta,
            kind,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.kind {
            NormKind::Layer => tape.layer_norm(x, p.var(self.gamma), p.var(self.beta)),
            NormKind::Channel => tape.channel_norm(x, p.var(self.gamma), p.var(self.beta)),
        }
    }

    pub fn numel(&self) -> usize {
        2 * self.channels
    }
}

/// Run `f` on a fresh tape with frozen parameters and return its output value.
pub fn evaluate(
    store: &ParamStore,
    inputs: &[&Tensor],
    f: impl FnOnce(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &bound, &vars)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_shape_follows_value() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        let l = Linear::new(&mut init, "fc", 4, 3, true).unwrap();
        assert_eq!(l.numel(), 15);
        assert_eq!(store.numel(), 15);
        for p in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
    }

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut store = ParamStore::new();
            let mut init = Init::new(&mut store, 11);
            Conv2d::new(&mut init, "c", 3, 4, 3, 1).unwrap();
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(
            a.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
            b.iter().map(|p| p.value.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn backward_populates_every_parameter_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let l = Linear::new(&mut init, "fc", 2, 2, true).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
        let y = l.forward(&mut tape, &bound, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        store.accumulate(&bound, &g);
        assert_eq!(store.value(l.bias.unwrap()).shape(), &[2]);
        assert_eq!(store.get(l.bias.unwrap()).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(l.weight).grad.data(), &[1.0, 1.0, -2.0, -2.0]);
    }
}
