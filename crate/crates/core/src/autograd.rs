//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes whose
//! inputs do not require gradients are evaluated but not *tracked*: they keep
//! no backward state, and [`Graph::tracked_nodes`] does not count them. This
//! is what lets the score-distillation gradient prove that it never builds
//! gradient state for the denoiser.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor: `(store tag, index within the store)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u8,
    pub index: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
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

impl ConvGeom {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn ncols(&self) -> usize {
        self.n * self.ohw()
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBatch(Var, Vec<f64>),
    ChannelAffine(Var, Vec<f64>),
    ChannelBias(Var, Var),
    Silu(Var),
    Upsample2x(Var),
    Gather(Var, Vec<usize>),
    BroadcastRows(Var),
    MeanSquare(Var),
    SumSquare(Var),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamKey, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients of every parameter leaf belonging to `store`, summed over
    /// repeated uses of the same parameter.
    pub fn param_grads(&self, store: u8, count: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; count];
        for (key, var) in &self.params {
            if key.store != store {
                continue;
            }
            if let Some(g) = self.get(*var) {
                match &mut out[key.index] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamKey, Var)>,
    train_params: bool,
    grad_enabled: bool,
    tracked: usize,
    saved_bytes: usize,
    peak_saved_bytes: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph whose parameters are constants (inference or input gradients).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            train_params: false,
            grad_enabled: true,
            tracked: 0,
            saved_bytes: 0,
            peak_saved_bytes: 0,
        }
    }

    /// A graph that tracks parameter leaves so their gradients can be read.
    pub fn training() -> Self {
        Self {
            train_params: true,
            ..Self::new()
        }
    }

    /// A graph that never tracks anything, like running under `no_grad`.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of nodes holding backward state.
    pub fn tracked_nodes(&self) -> usize {
        self.tracked
    }

    /// Bytes retained for the backward pass (activations and im2col buffers).
    pub fn saved_bytes(&self) -> usize {
        self.saved_bytes
    }

    pub fn peak_saved_bytes(&self) -> usize {
        self.peak_saved_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let tracked = tracked && self.grad_enabled;
        if tracked {
            self.tracked += 1;
            let extra = match &op {
                Op::Conv2d { cols, .. } => cols.len() * std::mem::size_of::<f64>(),
                _ => 0,
            };
            self.saved_bytes += value.bytes() + extra;
            self.peak_saved_bytes = self.peak_saved_bytes.max(self.saved_bytes);
        }
        // Untracked nodes never need their inputs again.
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that requires gradients (when gradients are enabled).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, t: &Tensor, key: ParamKey) -> Var {
        let v = self.push(t.clone(), Op::Leaf, self.train_params);
        if self.train_params {
            self.params.push((key, v));
        }
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; n * cout * geom.ohw()];
        conv_forward(self.value(w).data(), &cols, &mut out, &geom);
        if let Some(b) = b {
            let bias = self.value(b).data();
            let ohw = geom.ohw();
            for (i, chunk) in out.chunks_mut(ohw).enumerate() {
                let c = i % cout;
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out).expect("conv2d output");
        let mut parents = vec![x, w];
        parents.extend(b);
        let tracked = self.any_tracked(&parents);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: if tracked { cols } else { Vec::new() },
            },
            tracked,
        )
    }

    /// `x @ w^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs.len(), 2, "linear expects [N, in]");
        let (n, din) = (xs[0], xs[1]);
        let dout = ws[0];
        assert_eq!(ws[1], din, "linear dimension mismatch");
        let mut out = vec![0.0; n * dout];
        unsafe {
            matrixmultiply::dgemm(
                n,
                din,
                dout,
                1.0,
                self.value(x).data().as_ptr(),
                din as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                din as isize,
                0.0,
                out.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(&[n, dout], out).expect("linear output");
        let mut parents = vec![x, w];
        parents.extend(b);
        let tracked = self.any_tracked(&parents);
        self.push(value, Op::Linear { x, w, b }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Scale(a, s), tracked)
    }

    /// Multiplies batch item `i` by `coef[i]`.
    pub fn scale_batch(&mut self, a: Var, coef: Vec<f64>) -> Var {
        let src = self.value(a);
        let n = src.shape()[0];
        assert_eq!(coef.len(), n, "scale_batch coefficient count");
        let per = src.numel() / n;
        let mut value = src.clone();
        for (chunk, c) in value.data_mut().chunks_mut(per).zip(&coef) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::ScaleBatch(a, coef), tracked)
    }

    /// Per-channel constant affine map `x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut value = self.value(a).clone();
        for (i, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        let _ = n;
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::ChannelAffine(a, scale.to_vec()), tracked)
    }

    /// Adds `b: [N, C]` to every spatial position of `x: [N, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(b).shape(), &[n, c], "channel_bias shape");
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[i]);
        }
        let tracked = self.any_tracked(&[x, b]);
        self.push(value, Op::ChannelBias(x, b), tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Silu(a), tracked)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out).expect("upsample output");
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Upsample2x(a), tracked)
    }

    /// Rows of `table: [K, E]` selected by `idx`, giving `[idx.len(), E]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let e = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in &idx {
            out.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(&[idx.len(), e], out).expect("gather output");
        let tracked = self.any_tracked(&[table]);
        self.push(value, Op::Gather(table, idx), tracked)
    }

    /// Repeats a `[1, E]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape()[0], 1, "broadcast_rows expects a single row");
        let e = t.numel();
        let mut out = Vec::with_capacity(n * e);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[n, e], out).expect("broadcast output");
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::BroadcastRows(a), tracked)
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean_sq());
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::MeanSquare(a), tracked)
    }

    pub fn sum_square(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_sq());
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::SumSquare(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Sum(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape");
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Reshape(a), tracked)
    }

    /// Gradient of a scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`) back
    /// through the tape.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Grads> {
        self.value(root).same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let wv = self.value(*w).data();
                    if self.is_tracked(*w) {
                        let mut gw = vec![0.0; geom.cout * geom.kdim()];
                        conv_grad_weight(g.data(), cols, &mut gw, geom);
                        let t = Tensor::new(self.value(*w).shape(), gw)?;
                        self.accumulate(&mut grads, *w, t);
                    }
                    if let Some(b) = b {
                        if self.is_tracked(*b) {
                            let ohw = geom.ohw();
                            let mut gb = vec![0.0; geom.cout];
                            for (j, chunk) in g.data().chunks(ohw).enumerate() {
                                gb[j % geom.cout] += chunk.iter().sum::<f64>();
                            }
                            self.accumulate(&mut grads, *b, Tensor::new(&[geom.cout], gb)?);
                        }
                    }
                    if self.is_tracked(*x) {
                        let mut gcols = vec![0.0; geom.kdim() * geom.ncols()];
                        conv_grad_cols(wv, g.data(), &mut gcols, geom);
                        let gx = col2im(&gcols, geom);
                        let t = Tensor::new(self.value(*x).shape(), gx)?;
                        self.accumulate(&mut grads, *x, t);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, din) = (xv.shape()[0], xv.shape()[1]);
                    let dout = wv.shape()[0];
                    if self.is_tracked(*x) {
                        let mut gx = vec![0.0; n * din];
                        unsafe {
                            matrixmultiply::dgemm(
                                n,
                                dout,
                                din,
                                1.0,
                                g.data().as_ptr(),
                                dout as isize,
                                1,
                                wv.data().as_ptr(),
                                din as isize,
                                1,
                                0.0,
                                gx.as_mut_ptr(),
                                din as isize,
                                1,
                            );
                        }
                        self.accumulate(&mut grads, *x, Tensor::new(&[n, din], gx)?);
                    }
                    if self.is_tracked(*w) {
                        let mut gw = vec![0.0; dout * din];
                        unsafe {
                            matrixmultiply::dgemm(
                                dout,
                                n,
                                din,
                                1.0,
                                g.data().as_ptr(),
                                1,
                                dout as isize,
                                xv.data().as_ptr(),
                                din as isize,
                                1,
                                0.0,
                                gw.as_mut_ptr(),
                                din as isize,
                                1,
                            );
                        }
                        self.accumulate(&mut grads, *w, Tensor::new(&[dout, din], gw)?);
                    }
                    if let Some(b) = b {
                        if self.is_tracked(*b) {
                            let mut gb = vec![0.0; dout];
                            for row in g.data().chunks(dout) {
                                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                            self.accumulate(&mut grads, *b, Tensor::new(&[dout], gb)?);
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.scale(-1.0));
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.is_tracked(*a) {
                        let t = g.mul(self.value(*b));
                        self.accumulate(&mut grads, *a, t);
                    }
                    if self.is_tracked(*b) {
                        let t = g.mul(self.value(*a));
                        self.accumulate(&mut grads, *b, t);
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, *a, g.scale(*s)),
                Op::ScaleBatch(a, coef) => {
                    let mut t = g;
                    let per = t.numel() / coef.len();
                    for (chunk, c) in t.data_mut().chunks_mut(per).zip(coef) {
                        chunk.iter_mut().for_each(|v| *v *= c);
                    }
                    self.accumulate(&mut grads, *a, t);
                }
                Op::ChannelAffine(a, scale) => {
                    let (_, c, h, w) = g.dims4();
                    let mut t = g;
                    for (i, chunk) in t.data_mut().chunks_mut(h * w).enumerate() {
                        let s = scale[i % c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(&mut grads, *a, t);
                }
                Op::ChannelBias(x, b) => {
                    if self.is_tracked(*b) {
                        let (n, c, h, w) = g.dims4();
                        let gb: Vec<f64> = g.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                        self.accumulate(&mut grads, *b, Tensor::new(&[n, c], gb)?);
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Silu(a) => {
                    let t = g.zip(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    });
                    self.accumulate(&mut grads, *a, t);
                }
                Op::Upsample2x(a) => {
                    let (n, c, h, w) = self.value(*a).dims4();
                    let (h2, w2) = (2 * h, 2 * w);
                    let gd = g.data();
                    let mut out = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let s = &gd[plane * h2 * w2..(plane + 1) * h2 * w2];
                        let d = &mut out[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h2 {
                            for x in 0..w2 {
                                d[(y / 2) * w + x / 2] += s[y * w2 + x];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(&[n, c, h, w], out)?);
                }
                Op::Gather(table, idx) => {
                    let shape = self.value(*table).shape().to_vec();
                    let e = shape[1];
                    let mut out = Tensor::zeros(&shape);
                    for (row, &i) in idx.iter().enumerate() {
                        let src = &g.data()[row * e..(row + 1) * e];
                        out.data_mut()[i * e..(i + 1) * e]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(&mut grads, *table, out);
                }
                Op::BroadcastRows(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let e = self.value(*a).numel();
                    let mut out = vec![0.0; e];
                    for row in g.data().chunks(e) {
                        out.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(&shape, out)?);
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let k = 2.0 * g.data()[0] / x.numel() as f64;
                    self.accumulate(&mut grads, *a, x.scale(k));
                }
                Op::SumSquare(a) => {
                    let k = 2.0 * g.data()[0];
                    let t = self.value(*a).scale(k);
                    self.accumulate(&mut grads, *a, t);
                }
                Op::Sum(a) => {
                    let t = Tensor::full(self.value(*a).shape(), g.data()[0]);
                    self.accumulate(&mut grads, *a, t);
                }
                Op::Reshape(a) => {
                    let t = g.reshape(self.value(*a).shape())?;
                    self.accumulate(&mut grads, *a, t);
                }
            }
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
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

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ohw = g.ohw();
    let ncols = g.ncols();
    let mut cols = vec![0.0; g.kdim() * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let rbase = row * ncols;
                for b in 0..g.n {
                    let xbase = (b * g.cin + ci) * g.h * g.w;
                    let cbase = rbase + b * ohw;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * g.w;
                        let crow = cbase + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                cols[crow + ox] = x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ohw = g.ohw();
    let ncols = g.ncols();
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let rbase = row * ncols;
                for b in 0..g.n {
                    let xbase = (b * g.cin + ci) * g.h * g.w;
                    let cbase = rbase + b * ohw;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * g.w;
                        let crow = cbase + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[xrow + ix as usize] += cols[crow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(w: &[f64], cols: &[f64], out: &mut [f64], g: &ConvGeom) {
    let (kd, ohw, ncols) = (g.kdim(), g.ohw(), g.ncols());
    for b in 0..g.n {
        unsafe {
            matrixmultiply::dgemm(
                g.cout,
                kd,
                ohw,
                1.0,
                w.as_ptr(),
                kd as isize,
                1,
                cols.as_ptr().add(b * ohw),
                ncols as isize,
                1,
                0.0,
                out.as_mut_ptr().add(b * g.cout * ohw),
                ohw as isize,
                1,
            );
        }
    }
}

fn conv_grad_weight(gout: &[f64], cols: &[f64], gw: &mut [f64], g: &ConvGeom) {
    let (kd, ohw, ncols) = (g.kdim(), g.ohw(), g.ncols());
    for b in 0..g.n {
        unsafe {
            matrixmultiply::dgemm(
                g.cout,
                ohw,
                kd,
                1.0,
                gout.as_ptr().add(b * g.cout * ohw),
                ohw as isize,
                1,
                cols.as_ptr().add(b * ohw),
                1,
                ncols as isize,
                1.0,
                gw.as_mut_ptr(),
                kd as isize,
                1,
            );
        }
    }
}

fn conv_grad_cols(w: &[f64], gout: &[f64], gcols: &mut [f64], g: &ConvGeom) {
    let (kd, ohw, ncols) = (g.kdim(), g.ohw(), g.ncols());
    for b in 0..g.n {
        unsafe {
            matrixmultiply::dgemm(
                kd,
                g.cout,
                ohw,
                1.0,
                w.as_ptr(),
                1,
                kd as isize,
                gout.as_ptr().add(b * g.cout * ohw),
                ohw as isize,
                1,
                0.0,
                gcols.as_mut_ptr().add(b * ohw),
                ncols as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).norm() / (a.norm().max(b.norm()).max(1e-12))
    }

    fn conv_net(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, stride: usize) -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let w1v = g.constant(w1.clone());
        let b1v = g.constant(b1.clone());
        let w2v = g.constant(w2.clone());
        let h = g.conv2d(xv, w1v, Some(b1v), stride, 1);
        let h = g.silu(h);
        let h = g.upsample2x(h);
        let h = g.conv2d(h, w2v, None, 1, 1);
        let l = g.mean_square(h);
        (g, xv, l)
    }

    #[test]
    fn conv_stack_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 2, 6, 6], &mut rng);
        let w1 = Tensor::randn(&[3, 2, 4, 4], &mut rng).scale(0.3);
        let b1 = Tensor::randn(&[3], &mut rng);
        let w2 = Tensor::randn(&[2, 3, 3, 3], &mut rng).scale(0.3);
        let (g, xv, l) = conv_net(&x, &w1, &b1, &w2, 2);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&x, &|xx| {
            let (g, _, l) = conv_net(xx, &w1, &b1, &w2, 2);
            g.value(l).data()[0]
        });
        assert!(rel_err(&analytic, &numeric) < 1e-6, "{}", rel_err(&analytic, &numeric));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 2, 5, 5], &mut rng);
        let w = Tensor::randn(&[4, 2, 3, 3], &mut rng).scale(0.4);
        let f = |wt: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.input(wt.clone());
            let y = g.conv2d(xv, wv, None, 1, 1);
            let y = g.silu(y);
            let l = g.sum_square(y);
            (g, wv, l)
        };
        let (g, wv, l) = f(&w);
        let analytic = g.backward(l).unwrap().get(wv).unwrap().clone();
        let numeric = numeric_grad(&w, &|wt| {
            let (g, _, l) = f(wt);
            g.value(l).data()[0]
        });
        assert!(rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn linear_gather_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::randn(&[4, 3], &mut rng);
        let w = Tensor::randn(&[2, 3], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let x = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let build = |tb: &Tensor| {
            let mut g = Graph::new();
            let tv = g.input(tb.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let xv = g.constant(x.clone());
            let rows = g.gather(tv, vec![1, 3]);
            let e = g.linear(rows, wv, Some(bv));
            let e = g.silu(e);
            let y = g.channel_bias(xv, e);
            let y = g.scale_batch(y, vec![0.5, -2.0]);
            let l = g.sum_square(y);
            (g, tv, l)
        };
        let (g, tv, l) = build(&table);
        let analytic = g.backward(l).unwrap().get(tv).unwrap().clone();
        let numeric = numeric_grad(&table, &|tb| {
            let (g, _, l) = build(tb);
            g.value(l).data()[0]
        });
        assert!(rel_err(&analytic, &numeric) < 1e-6);
        // rows 0 and 2 are never gathered
        assert_eq!(&analytic.data()[0..3], &[0.0; 3]);
    }

    #[test]
    fn untracked_nodes_hold_no_state() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 0.5));
        let y = g.conv2d(x, w, None, 1, 1);
        let _ = g.silu(y);
        assert_eq!(g.tracked_nodes(), 0);
        assert_eq!(g.saved_bytes(), 0);
    }

    #[test]
    fn constant_inputs_are_not_tracked() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.input(Tensor::full(&[2], 2.0));
        let c = g.add(a, a);
        assert!(!g.is_tracked(c));
        let d = g.mul(c, b);
        assert!(g.is_tracked(d));
        assert_eq!(g.tracked_nodes(), 2);
    }
}
