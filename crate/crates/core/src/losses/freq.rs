use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::check_pair;
use crate::error::Result;
use crate::tensor::Tensor;

/// In-place 2-D FFT of each `H×W` channel plane.
fn fft2(planes: &mut [Complex64], c: usize, h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex64::default(); h];
    for plane in planes.chunks_mut(h * w).take(c) {
        row.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Per-channel 2-D DFT of `a − b`.
pub fn dft2_difference(a: &Tensor, b: &Tensor) -> Result<Vec<Complex64>> {
    check_pair(a, b)?;
    let (c, h, w) = a.dims3()?;
    let mut spec: Vec<Complex64> = a.data().iter().zip(b.data()).map(|(x, y)| Complex64::new(x - y, 0.0)).collect();
    fft2(&mut spec, c, h, w, false);
    Ok(spec)
}

/// Mean over all coefficients of `|F(a) − F(b)|`, where `F` is the
/// unnormalized per-channel 2-D DFT.
pub fn frequency_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    let spec = dft2_difference(a, b)?;
    Ok(spec.iter().map(|z| z.norm()).sum::<f64>() / spec.len() as f64)
}

/// [`frequency_loss`] and its gradient. Coefficients with a zero difference
/// contribute no gradient.
pub fn frequency_loss_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = a.dims3()?;
    let mut spec = dft2_difference(a, b)?;
    let n = spec.len() as f64;
    let mut value = 0.0;
    for z in spec.iter_mut() {
        let m = z.norm();
        value += m;
        *z = if m > 0.0 { *z / m } else { Complex64::default() };
    }
    // d|D_k|/dx_j = Re(u_k e^{+iθ_kj}) with u = D/|D|, i.e. the real part of
    // the unnormalized inverse transform of u.
    fft2(&mut spec, c, h, w, true);
    let grad = Tensor::new([c, h, w], spec.iter().map(|z| z.re / n).collect())?;
    Ok((value / n, grad))
}
