//! Sequential diagonal selective-scan kernels.
//!
//! Layouts: `x`, `delta` are `[D, L]`; `b`, `c` are `[S, L]`; `a_log` is
//! `[D, S]`. Internally the sweep runs time-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub d: usize,
    pub s: usize,
    pub l: usize,
}

impl ScanDims {
    pub fn check(
        &self,
        x: &[usize],
        delta: &[usize],
        a_log: &[usize],
        b: &[usize],
        c: &[usize],
        d_skip: &[usize],
    ) -> Result<()> {
        let ok = x.iter().product::<usize>() == self.d * self.l
            && delta == x
            && a_log == [self.d, self.s]
            && b.len() == 2
            && b[0] == self.s
            && b[1] == self.l
            && c == b
            && d_skip == [self.d];
        if !ok || self.s == 0 || self.l == 0 {
            return Err(Error::config(format!(
                "selective scan: inconsistent shapes x {x:?}, delta {delta:?}, A_log {a_log:?}, B {b:?}, C {c:?}, D {d_skip:?}"
            )));
        }
        Ok(())
    }
}

/// `[rows, cols]` → `[cols, rows]`.
fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for (r, row) in m.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// Forward quantities the reverse sweep needs, both `[L, D, S]`:
/// the hidden states `h_t` and the decay factors `exp(Δ_t A)`.
#[derive(Debug, Clone, Default)]
pub(crate) struct ScanCache {
    states: Vec<f64>,
    decays: Vec<f64>,
}

/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t`, `y_t = C_t · h_t + D x_t`,
/// with `A = -exp(A_log)` and `h_0 = 0`.
///
/// Inputs are transposed to time-major order first so that each step
/// touches contiguous memory.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    x: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: &[f64],
    dims: ScanDims,
    mut cache: Option<&mut ScanCache>,
) -> Vec<f64> {
    let ScanDims { d, s, l } = dims;
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let (xt, dtt) = (transpose(x, d, l), transpose(delta, d, l));
    let (bt, ct) = (transpose(b, s, l), transpose(c, s, l));
    let mut h = vec![0.0; d * s];
    let mut decay = vec![0.0; d * s];
    let mut yt = vec![0.0; d * l];
    if let Some(cache) = cache.as_deref_mut() {
        cache.states.clear();
        cache.states.reserve(l * d * s);
        cache.decays.clear();
        cache.decays.reserve(l * d * s);
    }
    for t in 0..l {
        let b_t = &bt[t * s..(t + 1) * s];
        let c_t = &ct[t * s..(t + 1) * s];
        for ch in 0..d {
            let dt = dtt[t * d + ch];
            let xv = xt[t * d + ch];
            let hrow = &mut h[ch * s..(ch + 1) * s];
            let drow = &mut decay[ch * s..(ch + 1) * s];
            let arow = &a[ch * s..(ch + 1) * s];
            let dx = dt * xv;
            let mut acc = 0.0;
            for k in 0..s {
                let e = (dt * arow[k]).exp();
                let hv = e * hrow[k] + dx * b_t[k];
                drow[k] = e;
                hrow[k] = hv;
                acc += c_t[k] * hv;
            }
            yt[t * d + ch] = acc + d_skip[ch] * xv;
        }
        if let Some(cache) = cache.as_deref_mut() {
            cache.states.extend_from_slice(&h);
            cache.decays.extend_from_slice(&decay);
        }
    }
    transpose(&yt, l, d)
}

pub(crate) struct ScanGrads {
    pub dx: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da_log: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd_skip: Vec<f64>,
}

/// Reverse sweep of [`scan_forward`] given its cache.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dy: &[f64],
    x: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: &[f64],
    cache: &ScanCache,
    dims: ScanDims,
) -> ScanGrads {
    let ScanDims { d, s, l } = dims;
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let (dyt, xt, dtt) = (transpose(dy, d, l), transpose(x, d, l), transpose(delta, d, l));
    let (bt, ct) = (transpose(b, s, l), transpose(c, s, l));
    let mut dxt = vec![0.0; d * l];
    let mut ddtt = vec![0.0; d * l];
    let mut dbt = vec![0.0; s * l];
    let mut dct = vec![0.0; s * l];
    let mut dd_skip = vec![0.0; d];
    let mut da = vec![0.0; d * s];
    let zeros = vec![0.0; d * s];
    // Running adjoint of h_t.
    let mut dh = vec![0.0; d * s];
    let ds = d * s;
    for t in (0..l).rev() {
        let h_t = &cache.states[t * ds..(t + 1) * ds];
        let h_prev = if t > 0 { &cache.states[(t - 1) * ds..t * ds] } else { &zeros[..] };
        let e_t = &cache.decays[t * ds..(t + 1) * ds];
        let b_t = &bt[t * s..(t + 1) * s];
        let c_t = &ct[t * s..(t + 1) * s];
        let db_t = &mut dbt[t * s..(t + 1) * s];
        let dc_t = &mut dct[t * s..(t + 1) * s];
        for ch in 0..d {
            let i = t * d + ch;
            let (gy, xv, dt) = (dyt[i], xt[i], dtt[i]);
            dd_skip[ch] += gy * xv;
            let mut ddt = 0.0;
            let mut dxv = d_skip[ch] * gy;
            let r = ch * s..(ch + 1) * s;
            let (h_row, hp_row) = (&h_t[r.clone()], &h_prev[r.clone()]);
            let (e_row, a_row) = (&e_t[r.clone()], &a[r.clone()]);
            let dh_row = &mut dh[r.clone()];
            let da_row = &mut da[r];
            for k in 0..s {
                dc_t[k] += gy * h_row[k];
                let dht = dh_row[k] + gy * c_t[k];
                let he = hp_row[k] * e_row[k];
                ddt += dht * (he * a_row[k] + b_t[k] * xv);
                da_row[k] += dht * he * dt;
                db_t[k] += dht * dt * xv;
                dxv += dht * dt * b_t[k];
                dh_row[k] = dht * e_row[k];
            }
            ddtt[i] = ddt;
            dxt[i] = dxv;
        }
    }
    let da_log = da
        .iter()
        .zip(&a)
        // dA/dA_log = A because A = -exp(A_log).
        .map(|(dav, av)| dav * av)
        .collect();
    ScanGrads {
        dx: transpose(&dxt, l, d),
        ddelta: transpose(&ddtt, l, d),
        da_log,
        db: transpose(&dbt, l, s),
        dc: transpose(&dct, l, s),
        dd_skip,
    }
}

