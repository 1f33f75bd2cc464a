//! Parameterised layers shared by the backbone, neck and head.

use crate::error::Result;
use crate::tensor::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim], INIT_STD))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => g.add_suffix(y, g.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn zero_weight<T: Float>(&self, store: &mut ParamStore<T>) {
        store
            .set_value(self.weight, Tensor::zeros(&[self.in_dim, self.out_dim]))
            .expect("same shape");
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(store, self.gamma), g.param(store, self.beta), LN_EPS)
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
    /// Uniform(+-1/sqrt(fan_in)) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            weight: store.add(format!("{name}.weight"), init.uniform(&[cout, cin, kernel, kernel], bound))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            g.param(store, self.weight),
            Some(g.param(store, self.bias)),
            self.stride,
            self.pad,
        )
    }
}
