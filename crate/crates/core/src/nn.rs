//! Parameterized building blocks shared by the network modules.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child scope; parameter names become `prefix.name.…`.
    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value)
    }

    /// `U(-1/√fan_in, 1/√fan_in)` weights.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), -bound, bound, self.rng);
        self.add(name, t)
    }
}

/// Pointwise affine map over channels (a "Linear" per position, or a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = init.fan_in_uniform("weight", &[cout, cin], cin)?;
        let bias = bias.then(|| init.add("bias", Tensor::zeros([cout]))).transpose()?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let weight = init.fan_in_uniform("weight", &[cout, cin, kernel, kernel], cin * kernel * kernel)?;
        let bias = init.add("bias", Tensor::zeros([cout]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    /// `k×k` convolution with "same" zero padding.
    pub fn same(init: &mut Init, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::new(init, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Channel layer normalization with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.add("gamma", Tensor::full([channels], 1.0))?,
            beta: init.add("beta", Tensor::zeros([channels]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Gated two-layer pointwise feed-forward map: the first projection
/// produces two halves whose product feeds the second projection.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    pub expand: Linear,
    pub project: Linear,
    pub hidden: usize,
}

impl GatedFfn {
    pub fn new(init: &mut Init, channels: usize, expansion: f64) -> Result<Self> {
        let hidden = ((channels as f64 * expansion).round() as usize).max(1);
        Ok(GatedFfn {
            expand: Linear::new(&mut init.scope("expand"), channels, 2 * hidden, true)?,
            project: Linear::new(&mut init.scope("project"), hidden, channels, true)?,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let both = self.expand.forward(g, x)?;
        let a = g.slice_channels(both, 0, self.hidden)?;
        let b = g.slice_channels(both, self.hidden, self.hidden)?;
        let gated = g.mul(a, b)?;
        self.project.forward(g, gated)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.expand.params();
        p.extend(self.project.params());
        p
    }
}
