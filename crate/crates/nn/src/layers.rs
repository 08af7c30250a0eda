//! Parameterised building blocks. Each layer only holds [`ParamId`]s; the
//! tensors live in the owning model's [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Float, Graph, ParamId, ParamStore, Tensor, Var};

fn uniform<T: Float>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

pub fn normal<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight stored as `[in, out]`, initialised N(0, `std`).
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal(rng, &[in_dim, out_dim], std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel, "same"-style padding `k / 2`, uniform fan-in init.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_ch, in_ch, kernel, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_ch], bound));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels, {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::ONE)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::ONE)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(rng, &[vocab, dim], std)),
            vocab,
            dim,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let t = g.param(store, self.table);
        g.index_rows(t, ids)
    }
}
