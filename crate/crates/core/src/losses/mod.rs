//! Reconstruction and structural losses on `C×H×W` images.
//!
//! Every loss comes as a value function and a `*_grad` variant that also
//! returns the gradient with respect to the prediction (the first argument).

mod freq;
mod ising;

pub use freq::{dft2_difference, frequency_loss, frequency_loss_grad};
pub use ising::{ising_loss, ising_loss_grad, ising_loss_oracle, Neighborhood};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the composite objective
/// `charbonnier + δ·edge + λ·frequency + w_ising·ising`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ, weight of the frequency term.
    pub lambda_freq: f64,
    /// δ, weight of the edge term.
    pub delta_edge: f64,
    /// ε of the Charbonnier penalty.
    pub epsilon: f64,
    pub ising_weight: f64,
    pub neighborhood: Neighborhood,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_freq: 0.1,
            delta_edge: 0.05,
            epsilon: 0.001,
            ising_weight: 1.0,
            neighborhood: Neighborhood::FourConnected,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("Charbonnier epsilon must be positive"));
        }
        for (name, w) in [
            ("lambda_freq", self.lambda_freq),
            ("delta_edge", self.delta_edge),
            ("ising_weight", self.ising_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("loss weight {name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// The composite loss and its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub charbonnier: f64,
    pub edge: f64,
    pub frequency: f64,
    pub ising: f64,
}

impl LossReport {
    /// Recomputes the weighted sum from the components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.charbonnier + w.delta_edge * self.edge + w.lambda_freq * self.frequency + w.ising_weight * self.ising
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.charbonnier += r.charbonnier / n;
            m.edge += r.edge / n;
            m.frequency += r.frequency / n;
            m.ising += r.ising / n;
        }
        m
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    a.dims3()?;
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over elements of `√((a−b)² + ε²)`.
pub fn charbonnier_loss(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<f64> {
    check_pair(a, b)?;
    let eps2 = epsilon * epsilon;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y).powi(2) + eps2).sqrt()).sum();
    Ok(s / a.len() as f64)
}

pub fn charbonnier_loss_grad(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<(f64, Tensor)> {
    check_pair(a, b)?;
    let eps2 = epsilon * epsilon;
    let n = a.len() as f64;
    let mut value = 0.0;
    let grad = a.zip_map(b, |x, y| {
        let r = ((x - y).powi(2) + eps2).sqrt();
        value += r;
        (x - y) / r / n
    })?;
    Ok((value / n, grad))
}

const LAPLACIAN: [(isize, isize, f64); 5] = [(0, 0, -4.0), (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)];

fn clamp(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Discrete Laplacian (`[[0,1,0],[1,-4,1],[0,1,0]]`) with replicate padding.
pub fn laplacian(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = LAPLACIAN
                    .iter()
                    .map(|&(dy, dx, k)| k * img.get3(ch, clamp(y as isize + dy, h), clamp(x as isize + dx, w)))
                    .sum();
                out.set3(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`laplacian`].
fn laplacian_adjoint(u: &Tensor) -> Tensor {
    let (c, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = u.get3(ch, y, x);
                for &(dy, dx, k) in &LAPLACIAN {
                    let (yy, xx) = (clamp(y as isize + dy, h), clamp(x as isize + dx, w));
                    let cur = out.get3(ch, yy, xx);
                    out.set3(ch, yy, xx, cur + k * g);
                }
            }
        }
    }
    out
}

/// Charbonnier distance between the Laplacians of the two images.
pub fn edge_loss(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<f64> {
    check_pair(a, b)?;
    charbonnier_loss(&laplacian(a)?, &laplacian(b)?, epsilon)
}

pub fn edge_loss_grad(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<(f64, Tensor)> {
    check_pair(a, b)?;
    let (v, g) = charbonnier_loss_grad(&laplacian(a)?, &laplacian(b)?, epsilon)?;
    Ok((v, laplacian_adjoint(&g)))
}

/// The weighted composite loss.
pub fn total_loss(pred: &Tensor, target: &Tensor, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let mut r = LossReport {
        total: 0.0,
        charbonnier: charbonnier_loss(pred, target, w.epsilon)?,
        edge: edge_loss(pred, target, w.epsilon)?,
        frequency: frequency_loss(pred, target)?,
        ising: ising_loss(pred, w.neighborhood)?,
    };
    r.total = r.weighted_sum(w);
    Ok(r)
}

/// [`total_loss`] and its gradient with respect to `pred`. Terms with zero
/// weight are still reported but contribute no gradient.
pub fn total_loss_grad(pred: &Tensor, target: &Tensor, w: &LossWeights) -> Result<(LossReport, Tensor)> {
    w.validate()?;
    let (charbonnier, mut grad) = charbonnier_loss_grad(pred, target, w.epsilon)?;
    let mut add = |scale: f64, g: Tensor| {
        if scale != 0.0 {
            for (acc, v) in grad.data_mut().iter_mut().zip(g.data()) {
                *acc += scale * v;
            }
        }
    };
    let (edge, ge) = edge_loss_grad(pred, target, w.epsilon)?;
    add(w.delta_edge, ge);
    let (frequency, gf) = frequency_loss_grad(pred, target)?;
    add(w.lambda_freq, gf);
    let (ising, gi) = ising_loss_grad(pred, w.neighborhood)?;
    add(w.ising_weight, gi);
    let mut r = LossReport {
        total: 0.0,
        charbonnier,
        edge,
        frequency,
        ising,
    };
    r.total = r.weighted_sum(w);
    Ok((r, grad))
}

#[cfg(test)]
mod tests;
