//! Parameterised layers on top of the autodiff graph, and batched
//! gradient evaluation.

use rand::Rng as _;
use rayon::prelude::*;
use usad_autodiff::{Element, GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::rng::Rng;

/// Variance floor used by every normalisation layer.
pub const NORM_EPS: f64 = 1e-5;

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("layer shapes are nonzero")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
    Uniform,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with 'same' padding for odd kernels.
    pub fn same(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self { c_in, c_out, kernel, stride: 1, padding: kernel / 2, groups: 1, bias: true }
    }

    pub fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel + if self.bias { self.c_out } else { 0 }
    }
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        let shape = [spec.c_out, spec.c_in / spec.groups, spec.kernel];
        let fan_in = (spec.c_in / spec.groups * spec.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let (w, b) = match init {
            Init::Uniform => (uniform(rng, &shape, bound), uniform(rng, &[spec.c_out], bound)),
            Init::Zero => (Tensor::zeros(&shape), Tensor::zeros(&[spec.c_out])),
        };
        let w = store.add(format!("{name}.w"), w)?;
        let b = if spec.bias { Some(store.add(format!("{name}.b"), b)?) } else { None };
        Ok(Self { w, b, stride: spec.stride, padding: spec.padding, groups: spec.groups })
    }

    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.conv1d(x, w, b, self.stride, self.padding, self.groups)?)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, n_in: usize, n_out: usize, init: Init) -> Result<Self> {
        let bound = 1.0 / (n_in as f64).sqrt();
        let (w, b) = match init {
            Init::Uniform => (uniform(rng, &[n_out, n_in], bound), uniform(rng, &[n_out], bound)),
            Init::Zero => (Tensor::zeros(&[n_out, n_in]), Tensor::zeros(&[n_out])),
        };
        Ok(Self { w: store.add(format!("{name}.w"), w)?, b: store.add(format!("{name}.b"), b)? })
    }

    pub fn param_count(n_in: usize, n_out: usize) -> usize {
        n_out * n_in + n_out
    }

    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.dense(x, w, Some(b))?)
    }
}

/// Inverted dropout. `rng` is `None` at inference, which makes this the
/// identity.
pub fn dropout<T: Element>(g: &mut Graph<'_, T>, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Ok(g.mul_mask(x, mask)?)
}

/// Builds and differentiates one graph per item, in parallel, and sums the
/// gradients in item order scaled by `1 / items.len()`. Returns the mean
/// loss and the gradient of the mean loss.
pub fn mean_gradients<I, F>(store: &ParamStore, items: &[I], f: F) -> Result<(f64, GradBuffer)>
where
    I: Sync,
    F: for<'s> Fn(&mut Graph<'s>, &'s ParamStore, &I) -> Result<Var> + Sync,
{
    let per_item: Vec<Result<_>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let loss = f(&mut g, store, item)?;
            let value = g.value(loss).item();
            Ok((value, g.backward(loss)?))
        })
        .collect();
    let scale = 1.0 / items.len().max(1) as f64;
    let mut buf = GradBuffer::zeros_like(store);
    let mut total = 0.0;
    for r in per_item {
        let (value, grads) = r?;
        total += value;
        grads.accumulate_into(&mut buf, scale);
    }
    Ok((total * scale, buf))
}
