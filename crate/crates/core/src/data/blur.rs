//! Blur kernels and synthetic degradation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel_kind", rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian { sigma: f64 },
    /// A line segment through the kernel center; `angle` in degrees.
    LinearMotion { length: f64, angle: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    /// Odd side length of the square kernel.
    pub kernel_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl BlurSpec {
    /// A Gaussian blur with a kernel covering ±3σ.
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        BlurSpec {
            kind: KernelKind::Gaussian { sigma },
            kernel_size: 2 * (3.0 * sigma).ceil() as usize + 1,
            noise_std: 0.0,
            seed,
        }
    }

    /// A linear motion blur with the smallest odd kernel holding the segment.
    pub fn motion(length: f64, angle: f64, seed: u64) -> Self {
        let k = length.ceil() as usize;
        BlurSpec {
            kind: KernelKind::LinearMotion { length, angle },
            kernel_size: k + 1 - k % 2,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std)));
        }
        match self.kind {
            KernelKind::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::config(format!("gaussian sigma must be positive, got {sigma}")))
            }
            KernelKind::LinearMotion { length, angle } if !(length >= 0.0 && length.is_finite() && angle.is_finite()) => {
                Err(Error::config(format!("invalid motion length {length} / angle {angle}")))
            }
            _ => Ok(()),
        }
    }

    /// Row-major `kernel_size × kernel_size` weights summing to 1.
    pub fn kernel(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let k = self.kernel_size;
        let r = (k / 2) as f64;
        let mut w = vec![0.0; k * k];
        match self.kind {
            KernelKind::Gaussian { sigma } => {
                for (i, v) in w.iter_mut().enumerate() {
                    let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
                    *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                }
            }
            KernelKind::LinearMotion { length, angle } => {
                // Splat evenly spaced samples along the segment bilinearly.
                let (sin, cos) = angle.to_radians().sin_cos();
                let samples = (8.0 * length.max(1.0)).ceil() as usize + 1;
                for j in 0..samples {
                    let t = if samples == 1 { 0.0 } else { j as f64 / (samples - 1) as f64 - 0.5 };
                    let x = (r + t * length * cos).clamp(0.0, 2.0 * r);
                    let y = (r - t * length * sin).clamp(0.0, 2.0 * r);
                    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            if wx * wy > 0.0 {
                                w[(y0 + dy) * k + x0 + dx] += wx * wy;
                            }
                        }
                    }
                }
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    }
}

/// 2-D correlation of every channel with a square kernel, replicating edge pixels.
pub fn convolve_replicate(image: &Tensor, kernel: &[f64], size: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if size % 2 == 0 || kernel.len() != size * size {
        return Err(Error::config("kernel must be square with odd side"));
    }
    let r = (size / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut out = Tensor::zeros([c, h, w]);
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..size {
                    let sy = clampi(y as isize + ky as isize - r, h);
                    let row = &plane[sy * w..(sy + 1) * w];
                    for kx in 0..size {
                        let sx = clampi(x as isize + kx as isize - r, w);
                        acc += kernel[ky * size + kx] * row[sx];
                    }
                }
                dst[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// `blurred = clip(sharp ⊛ kernel + noise, 0, 1)`; returns `(sharp, blurred)`.
pub fn make_blur_pair(sharp: &Tensor, spec: &BlurSpec) -> Result<(Tensor, Tensor)> {
    let kernel = spec.kernel()?;
    let mut blurred = convolve_replicate(sharp, &kernel, spec.kernel_size)?;
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise level");
        for v in blurred.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    blurred.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((sharp.clone(), blurred))
}
