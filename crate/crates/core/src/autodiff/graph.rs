//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! Every node owns its forward value (parameters are read from the store) and
//! whatever the backward rule needs. Nodes that do not depend on any input
//! requiring a gradient are skipped during the backward sweep, so frozen
//! sub-networks cost a forward pass only.

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::ssm::kernel::{self, ScanCache, ScanDims};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Reshape(Var),
    SliceChannels { x: Var, start: usize },
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Upsample2x(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    Scan { x: Var, delta: Var, a_log: Var, b: Var, c: Var, d_skip: Var, cache: ScanCache },
    ScalarLoss { x: Var, grad: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm epsilon used for every channel normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A computation tape. Parameters are borrowed from a [`ParamStore`].
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters (only constants and inputs).
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Backward::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A parameter leaf. It requires a gradient iff the parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("Graph::param needs a graph built with_params");
        let rg = store.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Sum of a non-empty list of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::config("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(out, Op::Softplus(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::concat_channels(&values)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Pointwise affine map over the leading (channel) axis:
    /// `x: [Cin, ...]`, `w: [Cout, Cin]`, `b: [Cout]` gives `[Cout, ...]`.
    /// This is both a "Linear" over per-position feature vectors and a 1×1
    /// convolution.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, l) = self.value(x).rows_cols();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::config(format!(
                "linear: weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        let cout = ws[0];
        let mut out = vec![0.0; cout * l];
        gemm(false, false, cout, l, cin, 1.0, self.value(w).data(), self.value(x).data(), 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::config(format!("linear: bias {:?} for {cout} outputs", bv.shape())));
            }
            for (row, &bias) in out.chunks_mut(l).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution with zero padding. `x: [Cin,H,W]`, `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::config(format!(
                "conv2d: weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::config(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit {h}×{wd}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, cout, k, stride, pad, oh, ow };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; cout * oh * ow];
        gemm(false, false, cout, oh * ow, cin * k * k, 1.0, self.value(w).data(), &cols, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::config(format!("conv2d: bias {:?} for {cout} outputs", bv.shape())));
            }
            for (row, &bias) in out.chunks_mut(oh * ow).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::new([cout, oh, ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Layer normalization across channels at every spatial position,
    /// followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, l) = self.value(x).rows_cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(format!("layer_norm: affine params must have shape [{c}]")));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; c * l];
        let mut inv_std = vec![0.0; l];
        let mut out = vec![0.0; c * l];
        for p in 0..l {
            let mean = (0..c).map(|ch| xv[ch * l + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xv[ch * l + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[p] = inv;
            for ch in 0..c {
                let xh = (xv[ch * l + p] - mean) * inv;
                xhat[ch * l + p] = xh;
                out[ch * l + p] = g[ch] * xh + bt[ch];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling of a `C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let xv = self.value(x);
        let out = Tensor::from_fn([c, 2 * h, 2 * w], |i| {
            let (ch, rem) = (i / (4 * h * w), i % (4 * h * w));
            let (y, xx) = (rem / (2 * w), rem % (2 * w));
            xv.data()[(ch * h + y / 2) * w + xx / 2]
        });
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Matrix product of two rank-2 values, optionally reading either operand transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::config("matmul expects rank-2 operands"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::config(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta, tb, m, n, k, 1.0, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Row-wise softmax of a rank-2 value.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::config("softmax_rows expects a rank-2 value"));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Diagonal selective scan. `x`, `delta`: `[D, L]`; `a_log`: `[D, S]`;
    /// `b`, `c`: `[S, L]`; `d_skip`: `[D]`. Output `[D, L]`.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let (d, l) = self.value(x).rows_cols();
        let s = self.value(a_log).rows_cols().1;
        let dims = ScanDims { d, s, l };
        dims.check(
            self.shape(x),
            self.shape(delta),
            self.shape(a_log),
            self.shape(b),
            self.shape(c),
            self.shape(d_skip),
        )?;
        let mut cache = ScanCache::default();
        let y = kernel::scan_forward(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a_log).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d_skip).data(),
            dims,
            Some(&mut cache),
        );
        if let Some(t) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("selective scan", format!("non-finite output at step {}", t % l)));
        }
        let rg = [x, delta, a_log, b, c, d_skip].iter().any(|&v| self.rg(v));
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(out, Op::Scan { x, delta, a_log, b, c, d_skip, cache }, rg))
    }

    /// A scalar node whose value and gradient with respect to `x` were computed
    /// outside the graph (used for the image losses).
    pub fn scalar_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        grad.expect_shape(self.shape(x))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { x, grad }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Backward> {
        if self.value(root).len() != 1 {
            return Err(Error::config("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        let mut params = Gradients::empty(self.params.map_or(0, ParamStore::len));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut params);
        }
        Ok(Backward { leaves: grads, params })
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], params: &mut Gradients) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {
                // Leaf gradients are kept in place for `Backward::wrt`.
                grads[i] = Some(g);
            }
            Op::Param(id) => params.accumulate_owned(*id, g),
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv).unwrap());
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av).unwrap());
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Silu(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * silu_grad(xv)).unwrap()),
            Op::Softplus(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv)).unwrap()),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(shape).unwrap());
            }
            Op::SliceChannels { x, start } => {
                let mut full = Tensor::zeros(self.shape(*x).to_vec());
                let inner = full.rows_cols().1;
                full.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                acc(*x, full);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let t = Tensor::new(self.shape(p).to_vec(), g.data()[offset..offset + n].to_vec()).unwrap();
                        acc(p, t);
                    }
                    offset += n;
                }
            }
            Op::Linear { x, w, b } => {
                let (cin, l) = self.value(*x).rows_cols();
                let cout = g.rows_cols().0;
                if self.rg(*w) {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(false, true, cout, cin, l, 1.0, g.data(), self.value(*x).data(), 0.0, &mut dw);
                    acc(*w, Tensor::new([cout, cin], dw).unwrap());
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    acc(b, row_sums(g.data(), cout, l));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; cin * l];
                    gemm(true, false, cin, l, cout, 1.0, self.value(*w).data(), g.data(), 0.0, &mut dx);
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let kk = geom.cin * geom.k * geom.k;
                let npix = geom.oh * geom.ow;
                if self.rg(*w) {
                    let mut dw = vec![0.0; geom.cout * kk];
                    gemm(false, true, geom.cout, kk, npix, 1.0, g.data(), cols, 0.0, &mut dw);
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    acc(b, row_sums(g.data(), geom.cout, npix));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * npix];
                    gemm(true, false, kk, npix, geom.cout, 1.0, self.value(*w).data(), g.data(), 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    acc(*x, Tensor::new([geom.cin, geom.h, geom.w], dx).unwrap());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (c, l) = self.value(*x).rows_cols();
                let gd = g.data();
                if self.rg(*gamma) {
                    let dg = (0..c)
                        .map(|ch| (0..l).map(|p| gd[ch * l + p] * xhat[ch * l + p]).sum())
                        .collect();
                    acc(*gamma, Tensor::new([c], dg).unwrap());
                }
                if self.rg(*beta) {
                    acc(*beta, row_sums(gd, c, l));
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dx = vec![0.0; c * l];
                    for p in 0..l {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let d = gd[ch * l + p] * gamma_v[ch];
                            mean_d += d;
                            mean_dx += d * xhat[ch * l + p];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for ch in 0..c {
                            let d = gd[ch * l + p] * gamma_v[ch];
                            dx[ch * l + p] = inv_std[p] * (d - mean_d - xhat[ch * l + p] * mean_dx);
                        }
                    }
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).dims3().unwrap();
                let mut dx = Tensor::zeros([c, h, w]);
                let gd = g.data();
                let d = dx.data_mut();
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        gemm(*tb, true, k, m, n, 1.0, bv, g.data(), 0.0, &mut da);
                    } else {
                        gemm(false, !*tb, m, k, n, 1.0, g.data(), bv, 0.0, &mut da);
                    }
                    acc(*a, Tensor::new(sa.to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        gemm(true, *ta, n, k, m, 1.0, g.data(), av, 0.0, &mut db);
                    } else {
                        gemm(!*ta, false, k, n, m, 1.0, av, g.data(), 0.0, &mut db);
                    }
                    acc(*b, Tensor::new(sb.to_vec(), db).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = self.shape(*x)[1];
                let y = self.nodes[i].value.as_ref().unwrap();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Scan { x, delta, a_log, b, c, d_skip, cache } => {
                let (d, l) = self.value(*x).rows_cols();
                let s = self.value(*a_log).rows_cols().1;
                let grads_out = kernel::scan_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a_log).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d_skip).data(),
                    cache,
                    ScanDims { d, s, l },
                );
                for (v, t) in [
                    (*x, grads_out.dx),
                    (*delta, grads_out.ddelta),
                    (*a_log, grads_out.da_log),
                    (*b, grads_out.db),
                    (*c, grads_out.dc),
                    (*d_skip, grads_out.dd_skip),
                ] {
                    if self.rg(v) {
                        acc(v, Tensor::new(self.shape(v).to_vec(), t).unwrap());
                    }
                }
            }
            Op::ScalarLoss { x, grad } => acc(*x, grad.scale(g.data()[0])),
        }
    }
}

/// Result of a reverse sweep.
pub struct Backward {
    leaves: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to a leaf created by [`Graph::input`]. `None`
    /// when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn row_sums(data: &[f64], rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn([rows], |r| data[r * cols..(r + 1) * cols].iter().sum())
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.k * g.k * npix];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * npix..][..npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow..][..g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * npix..][..npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, &v) in row[oy * g.ow..][..g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}
