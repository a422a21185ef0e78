//! Selective state-space scanning and the Mamba branch that wraps it.
//!
//! The recurrence is the diagonal selective scan with zero-order-hold
//! discretization of the state matrix:
//!
//! ```text
//! Δ_t = softplus(W_Δ x_t + b_Δ)
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t ⊙ B_t) x_t      A = -exp(A_log)
//! y_t = C_t · h_t + D ⊙ x_t                           h_0 = 0
//! ```
//!
//! with `B_t = W_B x_t` and `C_t = W_C x_t`. Feature maps are flattened in
//! raster order (row-major, one pass) before scanning.

pub(crate) mod kernel;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::nn::{Init, Linear};
use crate::tensor::{FeatureMap, Tensor};
use kernel::ScanDims;

/// Target step size of the initial `softplus(b_Δ)`.
pub const INITIAL_STEP: f64 = 1e-2;

/// Per-block selective-scan parameters over `D` channels and `S` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    /// `[D, S]`; the state matrix is `-exp(a_log)`, strictly negative.
    pub a_log: Tensor,
    /// `[D, D]`.
    pub dt_weight: Tensor,
    /// `[D]`.
    pub dt_bias: Tensor,
    /// `[S, D]`.
    pub b_proj: Tensor,
    /// `[S, D]`.
    pub c_proj: Tensor,
    /// `[D]`.
    pub d_skip: Tensor,
}

/// `A_log[d, s] = ln(s + 1)`, so `A` spans `[-1, -S]` on every channel.
pub fn s4d_real_a_log(channels: usize, state_dim: usize) -> Tensor {
    Tensor::from_fn([channels, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln())
}

/// Inverse softplus of [`INITIAL_STEP`].
pub fn initial_dt_bias() -> f64 {
    INITIAL_STEP.exp_m1().ln()
}

impl ScanParams {
    /// Randomly initialized parameters for `channels` channels.
    pub fn init(channels: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::config("scan needs at least one channel and one state"));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let mut u = |shape: [usize; 2]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        Ok(ScanParams {
            a_log: s4d_real_a_log(channels, state_dim),
            dt_weight: u([channels, channels]),
            dt_bias: Tensor::full([channels], initial_dt_bias()),
            b_proj: u([state_dim, channels]),
            c_proj: u([state_dim, channels]),
            d_skip: Tensor::full([channels], 1.0),
        })
    }

    pub fn channels(&self) -> usize {
        self.d_skip.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.rows_cols().1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        let s = self.state_dim();
        let ok = s >= 1
            && self.a_log.shape() == [d, s]
            && self.dt_weight.shape() == [d, d]
            && self.dt_bias.shape() == [d]
            && self.b_proj.shape() == [s, d]
            && self.c_proj.shape() == [s, d]
            && self.d_skip.shape() == [d];
        if !ok {
            return Err(Error::config(format!(
                "scan parameters are not shape-consistent for {d} channels and {s} states"
            )));
        }
        if !self.a_log.all_finite() {
            return Err(Error::config("A_log must be finite so that -exp(A_log) < 0"));
        }
        Ok(())
    }

    /// Advances `state` by one step and returns `y_t`.
    pub fn step(&self, state: &mut HiddenState, x_t: &[f64]) -> Result<Vec<f64>> {
        let (d, s) = (self.channels(), self.state_dim());
        if x_t.len() != d || state.h.shape() != [d, s] {
            return Err(Error::config(format!(
                "step: input of length {} / state {:?} for {d} channels",
                x_t.len(),
                state.h.shape()
            )));
        }
        let affine = |w: &Tensor, row: usize| -> f64 {
            w.data()[row * d..(row + 1) * d].iter().zip(x_t).map(|(a, b)| a * b).sum()
        };
        let b: Vec<f64> = (0..s).map(|k| affine(&self.b_proj, k)).collect();
        let c: Vec<f64> = (0..s).map(|k| affine(&self.c_proj, k)).collect();
        let h = state.h.data_mut();
        let mut y = vec![0.0; d];
        for ch in 0..d {
            let dt = softplus(affine(&self.dt_weight, ch) + self.dt_bias.data()[ch]);
            let mut acc = 0.0;
            for k in 0..s {
                let a = -self.a_log.data()[ch * s + k].exp();
                let hv = (dt * a).exp() * h[ch * s + k] + dt * b[k] * x_t[ch];
                h[ch * s + k] = hv;
                acc += c[k] * hv;
            }
            y[ch] = acc + self.d_skip.data()[ch] * x_t[ch];
        }
        if let Some(ch) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("selective scan step", format!("non-finite output on channel {ch}")));
        }
        Ok(y)
    }
}

/// Recurrent state of a scan, `[D, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
}

impl HiddenState {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        HiddenState {
            h: Tensor::zeros([channels, state_dim]),
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Runs the selective scan over a `L×D` sequence and returns the `L×D` outputs.
pub fn selective_scan(x: &Tensor, params: &ScanParams) -> Result<Tensor> {
    params.validate()?;
    let (d, s) = (params.channels(), params.state_dim());
    let l = match x.shape() {
        &[l, dd] if dd == d && l >= 1 => l,
        other => {
            return Err(Error::config(format!(
                "selective_scan: input {other:?} does not match {d} channels"
            )))
        }
    };
    if let Some(i) = x.first_non_finite() {
        return Err(Error::numeric("selective_scan input", format!("non-finite value at step {}", i / d)));
    }
    let xt = transpose(x.data(), l, d); // [D, L]
    let mut delta = vec![0.0; d * l];
    gemm(false, false, d, l, d, 1.0, params.dt_weight.data(), &xt, 0.0, &mut delta);
    for (row, bias) in delta.chunks_mut(l).zip(params.dt_bias.data()) {
        row.iter_mut().for_each(|v| *v = softplus(*v + bias));
    }
    let mut b = vec![0.0; s * l];
    let mut c = vec![0.0; s * l];
    gemm(false, false, s, l, d, 1.0, params.b_proj.data(), &xt, 0.0, &mut b);
    gemm(false, false, s, l, d, 1.0, params.c_proj.data(), &xt, 0.0, &mut c);
    let y = kernel::scan_forward(
        &xt,
        &delta,
        params.a_log.data(),
        &b,
        &c,
        params.d_skip.data(),
        ScanDims { d, s, l },
        None,
    );
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("selective_scan", format!("non-finite output at step {}", i % l)));
    }
    Tensor::new([l, d], transpose(&y, d, l))
}

/// The Mamba branch applied to one channel chunk:
///
/// ```text
/// F_t = VSSM(SiLU(conv1×1(Linear(flatten(F)))))
/// F_b = SiLU(Linear(flatten(F)))
/// out = unflatten(Linear(F_t ⊙ F_b))
/// ```
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv: Linear,
    pub gate_proj: Linear,
    pub out_proj: Linear,
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

impl MambaBlock {
    pub fn new(init: &mut Init, channels: usize, state_dim: usize) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::config("Mamba block needs at least one channel and one state"));
        }
        let dt_proj = Linear::new(&mut init.scope("dt_proj"), channels, channels, true)?;
        let block = MambaBlock {
            in_proj: Linear::new(&mut init.scope("in_proj"), channels, channels, true)?,
            conv: Linear::new(&mut init.scope("conv1x1"), channels, channels, true)?,
            gate_proj: Linear::new(&mut init.scope("gate_proj"), channels, channels, true)?,
            out_proj: Linear::new(&mut init.scope("out_proj"), channels, channels, true)?,
            b_proj: Linear::new(&mut init.scope("b_proj"), channels, state_dim, false)?,
            c_proj: Linear::new(&mut init.scope("c_proj"), channels, state_dim, false)?,
            a_log: init.add("a_log", s4d_real_a_log(channels, state_dim))?,
            d_skip: init.add("d_skip", Tensor::full([channels], 1.0))?,
            dt_proj,
            channels,
            state_dim,
        };
        Ok(block)
    }

    /// Sets the step-size bias so that `softplus(bias) = INITIAL_STEP`.
    pub fn init_dt_bias(&self, store: &mut ParamStore) {
        if let Some(b) = self.dt_proj.bias {
            store.get_mut(b).data_mut().fill(initial_dt_bias());
        }
    }

    /// The scan parameters as plain tensors.
    pub fn scan_params(&self, store: &ParamStore) -> ScanParams {
        ScanParams {
            a_log: store.get(self.a_log).clone(),
            dt_weight: store.get(self.dt_proj.weight).clone(),
            dt_bias: store.get(self.dt_proj.bias.expect("dt_proj has a bias")).clone(),
            b_proj: store.get(self.b_proj.weight).clone(),
            c_proj: store.get(self.c_proj.weight).clone(),
            d_skip: store.get(self.d_skip).clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "Mamba block built for {} channels got {c}",
                self.channels
            )));
        }
        let seq = g.reshape(x, &[c, h * w])?;
        let u = self.in_proj.forward(g, seq)?;
        let u = self.conv.forward(g, u)?;
        let u = g.silu(u);
        let dt = self.dt_proj.forward(g, u)?;
        let delta = g.softplus(dt);
        let b = self.b_proj.forward(g, u)?;
        let cm = self.c_proj.forward(g, u)?;
        let a_log = g.param(self.a_log);
        let d_skip = g.param(self.d_skip);
        let top = g.selective_scan(u, delta, a_log, b, cm, d_skip)?;
        let gate = self.gate_proj.forward(g, seq)?;
        let gate = g.silu(gate);
        let mixed = g.mul(top, gate)?;
        let out = self.out_proj.forward(g, mixed)?;
        g.reshape(out, &shape)
    }
}

/// Applies a Mamba block to a feature map without recording gradients.
pub fn mamba_block(f_chunk: &FeatureMap, block: &MambaBlock, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let x = g.constant(f_chunk.clone());
    let y = block.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests;
