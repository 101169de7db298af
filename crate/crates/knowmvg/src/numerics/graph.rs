//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Op methods
//! evaluate immediately, append a node recording the operation and its
//! operands, and hand back an opaque [`Var`] handle. [`Graph::backward`]
//! walks the tape once in reverse to produce gradients for every node that
//! (transitively) depends on a gradient-carrying leaf.
//!
//! Two invariants are enforced:
//! * every op output is scanned for NaN/±Inf and the process aborts naming
//!   the offending op — silent poison values never propagate;
//! * nodes can only reference earlier nodes, so reverse index order is a
//!   valid reverse-topological order and no sorting is ever needed.
//!
//! Leaves created with `needs_grad = false` (frozen weights, inputs) are
//! structural: gradients still flow *through* operations that consume them
//! into earlier gradient-carrying nodes, but no gradient buffer is ever
//! allocated for the frozen leaf itself.

use super::kernels::{matmul, matmul_nt, matmul_sorted, matmul_tn};
use super::scalar::Real;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// matrix (m×n) + row (1×n), broadcast over rows.
    AddRow(Var, Var),
    MatMul(Var, Var),
    /// A·Bᵀ with B stored row-major (n×k).
    MatMulNT(Var, Var),
    /// A·B with canonically ordered accumulation (see `kernels::matmul_sorted`).
    MatMulSorted(Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    /// Elementwise Huber-style kink at |x| = 1: 0.5x² inside, |x|−0.5 outside.
    SmoothL1(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    /// (1×1 scalar) · matrix.
    ScaleByScalar(Var, Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    MinConst(Var, T),
    MaxConst(Var, T),
    /// Unfold k×k neighbourhoods (zero-padded) of an h×w×ch map stored as
    /// (h·w)×ch into (h·w)×(k·k·ch) so a convolution becomes one matmul.
    Im2Col {
        src: Var,
        h: usize,
        w: usize,
        ch: usize,
        k: usize,
    },
    /// Bilinear resample of an sh×sw×ch map (rows = pixels) to dh×dw.
    ResizeBilinear {
        src: Var,
        sh: usize,
        sw: usize,
        dh: usize,
        dw: usize,
        ch: usize,
    },
    /// Mean binary cross-entropy on logits; numerically stable closed form.
    BceMean {
        logits: Var,
        targets: Var,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct GradStore<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node. `needs_grad = true` marks a trainable parameter.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push("leaf", value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if !value.all_finite() {
            panic!("non-finite value produced by op `{name}` (node {})", self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_needs(&self, a: Var, b: Var) -> bool {
        self.needs(a) || self.needs(b)
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
        let mut out = x.clone();
        for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o += v;
        }
        let ng = self.binary_needs(a, b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
        let mut out = x.clone();
        for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o -= v;
        }
        let ng = self.binary_needs(a, b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
        let mut out = x.clone();
        for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o *= v;
        }
        let ng = self.binary_needs(a, b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "div: shape mismatch");
        let mut out = x.clone();
        for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o /= v;
        }
        let ng = self.binary_needs(a, b);
        self.push("div", out, Op::Div(a, b), ng)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "min_elem: shape mismatch");
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| if p <= q { p } else { q })
            .collect();
        let out = Tensor::new(x.rows(), x.cols(), data).unwrap();
        let ng = self.binary_needs(a, b);
        self.push("min_elem", out, Op::MinElem(a, b), ng)
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "max_elem: shape mismatch");
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| if p >= q { p } else { q })
            .collect();
        let out = Tensor::new(x.rows(), x.cols(), data).unwrap();
        let ng = self.binary_needs(a, b);
        self.push("max_elem", out, Op::MaxElem(a, b), ng)
    }

    /// matrix + row vector, broadcast down the rows (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row: second operand must be 1×n");
        assert_eq!(x.cols(), r.cols(), "add_row: width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += v;
            }
        }
        let ng = self.binary_needs(a, row);
        self.push("add_row", out, Op::AddRow(a, row), ng)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.binary_needs(a, b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        let ng = self.binary_needs(a, b);
        self.push("matmul_nt", out, Op::MatMulNT(a, b), ng)
    }

    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_sorted(self.value(a), self.value(b));
        let ng = self.binary_needs(a, b);
        self.push("matmul_sorted", out, Op::MatMulSorted(a, b), ng)
    }

    // ---- scalar-broadcast ----

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push("add_const", out, Op::AddConst(a, c), ng)
    }

    pub fn min_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| if x <= c { x } else { c });
        let ng = self.needs(a);
        self.push("min_const", out, Op::MinConst(a, c), ng)
    }

    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| if x >= c { x } else { c });
        let ng = self.needs(a);
        self.push("max_const", out, Op::MaxConst(a, c), ng)
    }

    /// out = s · A where `s` is 1×1.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by: scalar must be 1×1");
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| sv * x);
        let ng = self.binary_needs(s, a);
        self.push("scale_by", out, Op::ScaleByScalar(s, a), ng)
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push("relu", out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_stable);
        let ng = self.needs(a);
        self.push("sigmoid", out, Op::Sigmoid(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.cos());
        let ng = self.needs(a);
        self.push("cos", out, Op::Cos(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sin());
        let ng = self.needs(a);
        self.push("sin", out, Op::Sin(a), ng)
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = T::cast(0.5);
        let out = self.value(a).map(|x| {
            if x.abs() < T::one() {
                half * x * x
            } else {
                x.abs() - half
            }
        });
        let ng = self.needs(a);
        self.push("smooth_l1", out, Op::SmoothL1(a), ng)
    }

    // ---- row-structured ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut denom = T::zero();
            let orow = out.row_mut(r);
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                denom += e;
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        let ng = self.needs(a);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalisation with learned gain/bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, xv.cols()), "layer_norm: gain must be 1×n");
        assert_eq!(b.shape(), (1, xv.cols()), "layer_norm: bias must be 1×n");
        let eps = T::cast(LN_EPS);
        let n = T::from_usize(xv.cols()).unwrap();
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                / n;
            let inv = (var + eps).sqrt().recip();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * inv * g[(0, c)] + b[(0, c)];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias }, ng)
    }

    // ---- shape surgery ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(t.as_slice());
            ng |= self.needs(p);
        }
        let out = Tensor::new(rows, cols, data).unwrap();
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.rows(), "slice_rows: bad range");
        let data = x.as_slice()[start * x.cols()..end * x.cols()].to_vec();
        let out = Tensor::new(end - start, x.cols(), data).unwrap();
        let ng = self.needs(a);
        self.push("slice_rows", out, Op::SliceRows(a, start, end), ng)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols(), "slice_cols: bad range");
        let mut out = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.needs(a);
        self.push("slice_cols", out, Op::SliceCols(a, start, end), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < x.rows(), "gather_rows: index {} out of {}", i, x.rows());
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        let ng = self.needs(a);
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .as_slice()
            .iter()
            .copied()
            .fold(T::zero(), |acc, v| acc + v);
        let ng = self.needs(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.len()).unwrap();
        let s = x
            .as_slice()
            .iter()
            .copied()
            .fold(T::zero(), |acc, v| acc + v)
            / n;
        let ng = self.needs(a);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    // ---- structured image ops ----

    pub fn im2col(&mut self, src: Var, h: usize, w: usize, k: usize) -> Var {
        let x = self.value(src);
        assert_eq!(x.rows(), h * w, "im2col: rows must equal h·w");
        assert!(k % 2 == 1, "im2col: kernel must be odd");
        let ch = x.cols();
        let p = k / 2;
        let mut out = Tensor::zeros(h * w, k * k * ch);
        for y in 0..h {
            for xx in 0..w {
                let orow = out.row_mut(y * w + xx);
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p as isize;
                        let sx = xx as isize + kx as isize - p as isize;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            continue; // zero padding
                        }
                        let srow = x.row(sy as usize * w + sx as usize);
                        let base = (ky * k + kx) * ch;
                        orow[base..base + ch].copy_from_slice(srow);
                    }
                }
            }
        }
        let ng = self.needs(src);
        self.push("im2col", out, Op::Im2Col { src, h, w, ch, k }, ng)
    }

    pub fn resize_bilinear(&mut self, src: Var, sh: usize, sw: usize, dh: usize, dw: usize) -> Var {
        let x = self.value(src);
        assert_eq!(x.rows(), sh * sw, "resize_bilinear: rows must equal sh·sw");
        let ch = x.cols();
        let taps_y = bilinear_taps(sh, dh);
        let taps_x = bilinear_taps(sw, dw);
        let mut out = Tensor::zeros(dh * dw, ch);
        for oy in 0..dh {
            let (y0, y1, wy) = taps_y[oy];
            for ox in 0..dw {
                let (x0, x1, wx) = taps_x[ox];
                let orow = out.row_mut(oy * dw + ox);
                for (c, o) in orow.iter_mut().enumerate() {
                    let v00 = x[(y0 * sw + x0, c)];
                    let v01 = x[(y0 * sw + x1, c)];
                    let v10 = x[(y1 * sw + x0, c)];
                    let v11 = x[(y1 * sw + x1, c)];
                    let top = v00 + T::cast(wx) * (v01 - v00);
                    let bot = v10 + T::cast(wx) * (v11 - v10);
                    *o = top + T::cast(wy) * (bot - top);
                }
            }
        }
        let ng = self.needs(src);
        self.push(
            "resize_bilinear",
            out,
            Op::ResizeBilinear {
                src,
                sh,
                sw,
                dh,
                dw,
                ch,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy over all elements, computed from logits with
    /// the usual overflow-free formulation. Output is 1×1.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var) -> Var {
        let (x, t) = (self.value(logits), self.value(targets));
        assert_eq!(x.shape(), t.shape(), "bce: shape mismatch");
        let n = T::from_usize(x.len()).unwrap();
        let mut acc = T::zero();
        for (&xi, &ti) in x.as_slice().iter().zip(t.as_slice()) {
            // max(x,0) − x·t + ln(1 + e^{−|x|})
            acc += xi.max(T::zero()) - xi * ti + (-xi.abs()).exp().ln_1p();
        }
        let ng = self.binary_needs(logits, targets);
        self.push(
            "bce_with_logits_mean",
            Tensor::scalar(acc / n),
            Op::BceMean { logits, targets },
            ng,
        )
    }

    // ---- backward ----

    /// Reverse pass from a 1×1 node. Returns per-node gradients; look them up
    /// with the same [`Var`] handles the forward pass produced.
    pub fn backward(&self, at: Var) -> GradStore<T> {
        assert_eq!(
            self.value(at).shape(),
            (1, 1),
            "backward: root must be a scalar node"
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.needs(at) {
            return GradStore { grads };
        }
        grads[at.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=at.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        GradStore { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, &d) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, hadamard(g, bv));
                self.acc(grads, *b, hadamard(g, av));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (o, &q) in da.as_mut_slice().iter_mut().zip(bv.as_slice()) {
                    *o /= q;
                }
                self.acc(grads, *a, da);
                let mut db = g.clone();
                for ((o, &p), &q) in db
                    .as_mut_slice()
                    .iter_mut()
                    .zip(av.as_slice())
                    .zip(bv.as_slice())
                {
                    *o = -*o * p / (q * q);
                }
                self.acc(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::MatMul(a, b) | Op::MatMulSorted(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, matmul_nt(g, bv));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, matmul_tn(av, g));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, matmul(g, bv));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, matmul_tn(g, av));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * *s)),
            Op::AddConst(a, _) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[i].value;
                let mut d = g.clone();
                for (o, &y) in d.as_mut_slice().iter_mut().zip(yv.as_slice()) {
                    *o *= y * (T::one() - y);
                }
                self.acc(grads, *a, d);
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    *o *= -x.sin();
                }
                self.acc(grads, *a, d);
            }
            Op::Sin(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    *o *= x.cos();
                }
                self.acc(grads, *a, d);
            }
            Op::SmoothL1(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    let slope = if x.abs() < T::one() { x } else { x.signum() };
                    *o *= slope;
                }
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv * gv)
                        .fold(T::zero(), |acc, v| acc + v);
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let eps = T::cast(LN_EPS);
                let n = T::from_usize(xv.cols()).unwrap();
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let mut dgain = Tensor::zeros(1, xv.cols());
                let mut dbias = Tensor::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / n;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |a, v| a + v)
                        / n;
                    let inv = (var + eps).sqrt().recip();
                    // h = g ⊙ gain; dx = inv · (h − mean(h) − x̂ · mean(h ⊙ x̂))
                    let mut mean_h = T::zero();
                    let mut mean_hx = T::zero();
                    for c in 0..xv.cols() {
                        let xh = (row[c] - mean) * inv;
                        let h = gr[c] * gv[(0, c)];
                        mean_h += h;
                        mean_hx += h * xh;
                        dgain[(0, c)] += gr[c] * xh;
                        dbias[(0, c)] += gr[c];
                    }
                    mean_h /= n;
                    mean_hx /= n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let xh = (row[c] - mean) * inv;
                        let h = gr[c] * gv[(0, c)];
                        *o = inv * (h - mean_h - xh * mean_hx);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
                self.acc(grads, *bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let data = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                        self.acc(grads, p, Tensor::new(rows, cols, data).unwrap());
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, s, _e) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(s + r).copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, s, e) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*s..*e].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v; // duplicates accumulate
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(src.rows(), src.cols(), gv));
            }
            Op::MeanAll(a) => {
                let src = self.value(*a);
                let gv = g.item() / T::from_usize(src.len()).unwrap();
                self.acc(grads, *a, Tensor::full(src.rows(), src.cols(), gv));
            }
            Op::ScaleByScalar(s, a) => {
                let (sv, av) = (self.value(*s).item(), self.value(*a));
                if self.needs(*s) {
                    let ds = g.dot(av);
                    self.acc(grads, *s, Tensor::scalar(ds));
                }
                self.acc(grads, *a, g.map(|x| x * sv));
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let take_a: Vec<bool> = {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let is_min = matches!(self.nodes[i].op, Op::MinElem(..));
                    av.as_slice()
                        .iter()
                        .zip(bv.as_slice())
                        .map(|(&p, &q)| if is_min { p <= q } else { p >= q })
                        .collect()
                };
                let mut da = g.clone();
                let mut db = g.clone();
                for (k, &ta) in take_a.iter().enumerate() {
                    if ta {
                        db.as_mut_slice()[k] = T::zero();
                    } else {
                        da.as_mut_slice()[k] = T::zero();
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::MinConst(a, c) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    if x > *c {
                        *o = T::zero();
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::MaxConst(a, c) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (o, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                    if x < *c {
                        *o = T::zero();
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Im2Col { src, h, w, ch, k } => {
                let (h, w, ch, k) = (*h, *w, *ch, *k);
                let p = k / 2;
                let mut d = Tensor::zeros(h * w, ch);
                for y in 0..h {
                    for xx in 0..w {
                        let grow = g.row(y * w + xx);
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p as isize;
                                let sx = xx as isize + kx as isize - p as isize;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let drow = d.row_mut(sy as usize * w + sx as usize);
                                let base = (ky * k + kx) * ch;
                                for (o, &v) in drow.iter_mut().zip(&grow[base..base + ch]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *src, d);
            }
            Op::ResizeBilinear {
                src,
                sh,
                sw,
                dh,
                dw,
                ch,
            } => {
                let (sh, sw, dh, dw, ch) = (*sh, *sw, *dh, *dw, *ch);
                let taps_y = bilinear_taps(sh, dh);
                let taps_x = bilinear_taps(sw, dw);
                let mut d = Tensor::zeros(sh * sw, ch);
                for oy in 0..dh {
                    let (y0, y1, wy) = taps_y[oy];
                    for ox in 0..dw {
                        let (x0, x1, wx) = taps_x[ox];
                        let grow = g.row(oy * dw + ox);
                        let (wy, wx) = (T::cast(wy), T::cast(wx));
                        let w00 = (T::one() - wy) * (T::one() - wx);
                        let w01 = (T::one() - wy) * wx;
                        let w10 = wy * (T::one() - wx);
                        let w11 = wy * wx;
                        for (c, &gv) in grow.iter().enumerate() {
                            d[(y0 * sw + x0, c)] += w00 * gv;
                            d[(y0 * sw + x1, c)] += w01 * gv;
                            d[(y1 * sw + x0, c)] += w10 * gv;
                            d[(y1 * sw + x1, c)] += w11 * gv;
                        }
                    }
                }
                self.acc(grads, *src, d);
            }
            Op::BceMean { logits, targets } => {
                let (xv, tv) = (self.value(*logits), self.value(*targets));
                let n = T::from_usize(xv.len()).unwrap();
                let gv = g.item() / n;
                if self.needs(*logits) {
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for ((o, &x), &t) in d
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(tv.as_slice())
                    {
                        *o = (sigmoid_stable(x) - t) * gv;
                    }
                    self.acc(grads, *logits, d);
                }
                if self.needs(*targets) {
                    let d = xv.map(|x| -x * gv);
                    self.acc(grads, *targets, d);
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= v;
    }
    out
}

/// (lo, hi, fractional weight of hi) per destination index, half-pixel
/// convention with edge clamping. Same-size resize degenerates to identity
/// taps (weight exactly 0 on an integer source coordinate).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
