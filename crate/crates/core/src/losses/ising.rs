use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel neighbourhood used by the Ising penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    #[default]
    FourConnected,
    EightConnected,
}

impl Neighborhood {
    /// All `(dy, dx)` neighbour offsets.
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::FourConnected => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::EightConnected => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }

    /// One offset per unordered neighbour pair.
    fn half_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::FourConnected => &[(0, 1), (1, 0)],
            Neighborhood::EightConnected => &[(0, 1), (1, 0), (1, 1), (1, -1)],
        }
    }
}

fn validate(img: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = img.dims3()?;
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::config("Ising loss needs a non-empty image"));
    }
    if let Some(i) = img.first_non_finite() {
        return Err(Error::numeric("Ising loss", format!("non-finite pixel at flat index {i}")));
    }
    Ok(dims)
}

/// Visits every unordered in-bounds neighbour pair `(p, q)` as flat indices.
fn for_each_pair(c: usize, h: usize, w: usize, nb: Neighborhood, mut f: impl FnMut(usize, usize)) {
    for &(dy, dx) in nb.half_offsets() {
        let ys = 0..h.saturating_sub(dy.unsigned_abs());
        for ch in 0..c {
            for y in ys.clone() {
                let y2 = (y as isize + dy) as usize;
                for x in 0..w {
                    let x2 = x as isize + dx;
                    if x2 < 0 || x2 >= w as isize {
                        continue;
                    }
                    f((ch * h + y) * w + x, (ch * h + y2) * w + x2 as usize);
                }
            }
        }
    }
}

/// Sum over pixels, their in-bounds neighbours and channels of
/// `|I_c(x,y) − I_c(x',y')|`, divided by `C·H·W`. Every unordered pair is
/// visited from both endpoints, so it contributes twice.
pub fn ising_loss(img: &Tensor, nb: Neighborhood) -> Result<f64> {
    let (c, h, w) = validate(img)?;
    let d = img.data();
    let mut sum = 0.0;
    for_each_pair(c, h, w, nb, |p, q| sum += (d[p] - d[q]).abs());
    Ok(2.0 * sum / (c * h * w) as f64)
}

/// [`ising_loss`] and its gradient; the subgradient of `|0|` is taken as 0.
pub fn ising_loss_grad(img: &Tensor, nb: Neighborhood) -> Result<(f64, Tensor)> {
    let (c, h, w) = validate(img)?;
    let z = (c * h * w) as f64;
    let d = img.data();
    let mut grad = Tensor::zeros([c, h, w]);
    let g = grad.data_mut();
    let mut sum = 0.0;
    for_each_pair(c, h, w, nb, |p, q| {
        let diff = d[p] - d[q];
        sum += diff.abs();
        let s = if diff > 0.0 {
            2.0 / z
        } else if diff < 0.0 {
            -2.0 / z
        } else {
            0.0
        };
        g[p] += s;
        g[q] -= s;
    });
    Ok((2.0 * sum / z, grad))
}

/// Direct transcription of the per-pixel, per-neighbour, per-channel
/// accumulation. Slow; kept as a reference for [`ising_loss`].
pub fn ising_loss_oracle(img: &Tensor, nb: Neighborhood) -> Result<f64> {
    let (c, h, w) = validate(img)?;
    let mut loss = 0.0;
    for x in 0..h {
        for y in 0..w {
            for &(dx, dy) in nb.offsets() {
                let (xn, yn) = (x as isize + dx, y as isize + dy);
                if xn < 0 || yn < 0 || xn >= h as isize || yn >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    loss += (img.get3(ch, x, y) - img.get3(ch, xn as usize, yn as usize)).abs();
                }
            }
        }
    }
    Ok(loss / (c * h * w) as f64)
}
