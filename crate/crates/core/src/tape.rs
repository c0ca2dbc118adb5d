//! Reverse-mode autodiff over 2-D arrays.
//!
//! The whole model fits in matrices of shape (tokens, dim), so the engine
//! only supports `Array2`. Ops are recorded on a flat tape in topological
//! order; `backward` walks it once in reverse. Values are `Arc`-shared so
//! parameters can be registered on many tapes (one per batch item) without
//! copying.
//!
//! Generic over the element type: training runs in `f32`, gradient
//! finite-difference checks run the same code in `f64`.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Element types the tape can differentiate through.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + std::iter::Sum
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal conversion")
    }
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}
impl Real for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

enum Op<F: Real> {
    Leaf,
    MatMul(TensorId, TensorId),
    /// a (m,d) x b(n,d)^T -> (m,n)
    MatMulTB(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// (s,d) + (1,d) broadcast over rows
    AddRow(TensorId, TensorId),
    /// (s,d) * (s,1) broadcast over columns
    MulCol(TensorId, TensorId),
    Scale(TensorId, F),
    AddConst(TensorId, F),
    /// x*(1+scale)+shift with scale,shift (1,d)
    RowAffine(TensorId, TensorId, TensorId),
    /// x*g with g (1,d)
    RowGate(TensorId, TensorId),
    /// per-row layernorm, no affine; saved (mean, inv_std) per row
    LayerNorm(TensorId, Vec<F>, Vec<F>),
    Softmax(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Log(TensorId),
    PowConst(TensorId, F),
    Clamp(TensorId, F, F),
    /// pairwise rotation by fixed per-row angles; cos/sin are (s, d/2)
    Rope(TensorId, Arc<Array2<F>>, Arc<Array2<F>>),
    ConcatRows(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    ConcatCols(Vec<TensorId>),
    SliceCols(TensorId, usize, usize),
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node<F: Real> {
    value: Arc<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: TensorId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Scalar value of a (1,1) node.
    pub fn scalar_val(&self, id: TensorId) -> F {
        let v = self.val(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn ng(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Array2<F>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Shared-parameter leaf; gradients are collected for it.
    pub fn param(&mut self, value: Arc<Array2<F>>) -> TensorId {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        TensorId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (k2, _n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {m}x{k} vs {k2}");
        let v = self.val(a).dot(self.val(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    /// a (m,d) x b (n,d)^T
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (_, d) = self.shape(a);
        let (_, d2) = self.shape(b);
        assert_eq!(d, d2, "matmul_tb inner dims");
        let v = self.val(a).dot(&self.val(b).t());
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulTB(a, b), needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = self.val(a) + self.val(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = self.val(a) - self.val(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = self.val(a) * self.val(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (_, d) = self.shape(a);
        assert_eq!(self.shape(b), (1, d), "add_row bias shape");
        let v = self.val(a) + self.val(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), needs)
    }

    pub fn mul_col(&mut self, a: TensorId, m: TensorId) -> TensorId {
        let (s, _) = self.shape(a);
        assert_eq!(self.shape(m), (s, 1), "mul_col mask shape");
        let v = self.val(a) * self.val(m);
        let needs = self.ng(a) || self.ng(m);
        self.push(v, Op::MulCol(a, m), needs)
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let v = self.val(a).mapv(|x| x * c);
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: TensorId, c: F) -> TensorId {
        let v = self.val(a).mapv(|x| x + c);
        let needs = self.ng(a);
        self.push(v, Op::AddConst(a, c), needs)
    }

    /// x * (1 + scale) + shift, with (1,d) modulation vectors.
    pub fn row_affine(&mut self, x: TensorId, scale: TensorId, shift: TensorId) -> TensorId {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(scale), (1, d));
        assert_eq!(self.shape(shift), (1, d));
        let one = F::one();
        let v = self.val(x) * &self.val(scale).mapv(|s| s + one) + self.val(shift);
        let needs = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(v, Op::RowAffine(x, scale, shift), needs)
    }

    /// x * g with a (1,d) gate vector.
    pub fn row_gate(&mut self, x: TensorId, g: TensorId) -> TensorId {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(g), (1, d));
        let v = self.val(x) * self.val(g);
        let needs = self.ng(x) || self.ng(g);
        self.push(v, Op::RowGate(x, g), needs)
    }

    pub fn layer_norm(&mut self, x: TensorId, eps: F) -> TensorId {
        let xv = self.val(x);
        let (s, d) = xv.dim();
        let dn = F::lit(d as f64);
        let mut out = Array2::zeros((s, d));
        let mut means = Vec::with_capacity(s);
        let mut inv_stds = Vec::with_capacity(s);
        for i in 0..s {
            let row = xv.row(i);
            let mean = row.sum() / dn;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let inv_std = F::one() / (var + eps).sqrt();
            for j in 0..d {
                out[[i, j]] = (xv[[i, j]] - mean) * inv_std;
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let needs = self.ng(x);
        self.push(out, Op::LayerNorm(x, means, inv_stds), needs)
    }

    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let xv = self.val(x);
        let (s, d) = xv.dim();
        let mut out = Array2::zeros((s, d));
        for i in 0..s {
            let row = xv.row(i);
            let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for j in 0..d {
                let e = (xv[[i, j]] - max).exp();
                out[[i, j]] = e;
                sum = sum + e;
            }
            for j in 0..d {
                out[[i, j]] = out[[i, j]] / sum;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = self.val(x).mapv(gelu_fwd);
        let needs = self.ng(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = F::one();
        let v = self.val(x).mapv(|t| one / (one + (-t).exp()));
        let needs = self.ng(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let v = self.val(x).mapv(|t| t.ln());
        let needs = self.ng(x);
        self.push(v, Op::Log(x), needs)
    }

    pub fn pow_const(&mut self, x: TensorId, p: F) -> TensorId {
        let v = self.val(x).mapv(|t| t.powf(p));
        let needs = self.ng(x);
        self.push(v, Op::PowConst(x, p), needs)
    }

    pub fn clamp(&mut self, x: TensorId, lo: F, hi: F) -> TensorId {
        let v = self.val(x).mapv(|t| t.max(lo).min(hi));
        let needs = self.ng(x);
        self.push(v, Op::Clamp(x, lo, hi), needs)
    }

    /// Rotate consecutive (even, odd) element pairs of each row by fixed
    /// per-(row, pair) angles given as cos/sin tables of shape (s, d/2).
    pub fn rope(&mut self, x: TensorId, cos: Arc<Array2<F>>, sin: Arc<Array2<F>>) -> TensorId {
        let (s, d) = self.shape(x);
        assert_eq!(d % 2, 0, "rope dim must be even");
        assert_eq!(cos.dim(), (s, d / 2), "rope table shape");
        assert_eq!(sin.dim(), (s, d / 2), "rope table shape");
        let xv = self.val(x);
        let mut out = Array2::zeros((s, d));
        for i in 0..s {
            for j in 0..d / 2 {
                let (c, sn) = (cos[[i, j]], sin[[i, j]]);
                let x0 = xv[[i, 2 * j]];
                let x1 = xv[[i, 2 * j + 1]];
                out[[i, 2 * j]] = x0 * c - x1 * sn;
                out[[i, 2 * j + 1]] = x0 * sn + x1 * c;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::Rope(x, cos, sin), needs)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let d = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Array2::zeros((total, d));
        let mut row = 0;
        for &p in parts {
            let v = self.val(p);
            assert_eq!(v.dim().1, d, "concat_rows dim mismatch");
            out.slice_mut(ndarray::s![row..row + v.dim().0, ..]).assign(v);
            row += v.dim().0;
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let (s, _) = self.shape(x);
        assert!(start + len <= s, "slice_rows out of range");
        let v = self.val(x).slice(ndarray::s![start..start + len, ..]).to_owned();
        let needs = self.ng(x);
        self.push(v, Op::SliceRows(x, start, len), needs)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let s = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array2::zeros((s, total));
        let mut col = 0;
        for &p in parts {
            let v = self.val(p);
            assert_eq!(v.dim().0, s, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., col..col + v.dim().1]).assign(v);
            col += v.dim().1;
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let (_, d) = self.shape(x);
        assert!(start + len <= d, "slice_cols out of range");
        let v = self.val(x).slice(ndarray::s![.., start..start + len]).to_owned();
        let needs = self.ng(x);
        self.push(v, Op::SliceCols(x, start, len), needs)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = Array2::from_elem((1, 1), self.val(x).sum());
        let needs = self.ng(x);
        self.push(v, Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.val(x).len();
        let v = Array2::from_elem((1, 1), self.val(x).sum() / F::lit(n as f64));
        let needs = self.ng(x);
        self.push(v, Op::MeanAll(x), needs)
    }

    /// Mean squared error between two same-shape tensors, as a (1,1) node.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Backprop from a scalar (1,1) node. Returns one gradient slot per node.
    pub fn backward(&mut self, loss: TensorId) -> Vec<Option<Array2<F>>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(dy); // keep leaf grads for collection
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        let g = dy.dot(&self.val(b).t());
                        acc(&mut grads[a.0], g);
                    }
                    if self.ng(b) {
                        let g = self.val(a).t().dot(&dy);
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::MatMulTB(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        let g = dy.dot(self.val(b));
                        acc(&mut grads[a.0], g);
                    }
                    if self.ng(b) {
                        let g = dy.t().dot(self.val(a));
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if self.ng(b) {
                        acc(&mut grads[b.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if self.ng(b) {
                        acc(&mut grads[b.0], dy.mapv(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        let g = &dy * self.val(b);
                        acc(&mut grads[a.0], g);
                    }
                    if self.ng(b) {
                        let g = &dy * self.val(a);
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if self.ng(b) {
                        let g = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::MulCol(a, m) => {
                    let (a, m) = (*a, *m);
                    if self.ng(a) {
                        let g = &dy * self.val(m);
                        acc(&mut grads[a.0], g);
                    }
                    if self.ng(m) {
                        let g = (&dy * self.val(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads[m.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.ng(a) {
                        acc(&mut grads[a.0], dy.mapv(|v| v * c));
                    }
                }
                Op::AddConst(a, _) => {
                    let a = *a;
                    if self.ng(a) {
                        acc(&mut grads[a.0], dy);
                    }
                }
                Op::RowAffine(x, scale, shift) => {
                    let (x, scale, shift) = (*x, *scale, *shift);
                    let one = F::one();
                    if self.ng(x) {
                        let g = &dy * &self.val(scale).mapv(|s| s + one);
                        acc(&mut grads[x.0], g);
                    }
                    if self.ng(scale) {
                        let g = (&dy * self.val(x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads[scale.0], g);
                    }
                    if self.ng(shift) {
                        let g = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads[shift.0], g);
                    }
                }
                Op::RowGate(x, gate) => {
                    let (x, gate) = (*x, *gate);
                    if self.ng(x) {
                        let g = &dy * self.val(gate);
                        acc(&mut grads[x.0], g);
                    }
                    if self.ng(gate) {
                        let g = (&dy * self.val(x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads[gate.0], g);
                    }
                }
                Op::LayerNorm(x, _means, inv_stds) => {
                    let x = *x;
                    if self.ng(x) {
                        let y = self.val(TensorId(i));
                        let (s, d) = y.dim();
                        let dn = F::lit(d as f64);
                        let mut g = Array2::zeros((s, d));
                        for r in 0..s {
                            let inv_std = inv_stds[r];
                            let mut sum_dy = F::zero();
                            let mut sum_dy_y = F::zero();
                            for c in 0..d {
                                sum_dy = sum_dy + dy[[r, c]];
                                sum_dy_y = sum_dy_y + dy[[r, c]] * y[[r, c]];
                            }
                            let m1 = sum_dy / dn;
                            let m2 = sum_dy_y / dn;
                            for c in 0..d {
                                g[[r, c]] = inv_std * (dy[[r, c]] - m1 - y[[r, c]] * m2);
                            }
                        }
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let y = self.val(TensorId(i));
                        let (s, d) = y.dim();
                        let mut g = Array2::zeros((s, d));
                        for r in 0..s {
                            let mut dot = F::zero();
                            for c in 0..d {
                                dot = dot + dy[[r, c]] * y[[r, c]];
                            }
                            for c in 0..d {
                                g[[r, c]] = y[[r, c]] * (dy[[r, c]] - dot);
                            }
                        }
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let g = ndarray::Zip::from(&dy)
                            .and(self.val(x))
                            .map_collect(|&d, &v| d * gelu_bwd(v));
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let y = self.val(TensorId(i));
                        let one = F::one();
                        let g = ndarray::Zip::from(&dy)
                            .and(y)
                            .map_collect(|&d, &yv| d * yv * (one - yv));
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Log(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let g = &dy / self.val(x);
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::PowConst(x, p) => {
                    let (x, p) = (*x, *p);
                    if self.ng(x) {
                        let pm1 = p - F::one();
                        let g = ndarray::Zip::from(&dy)
                            .and(self.val(x))
                            .map_collect(|&d, &v| d * p * v.powf(pm1));
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    if self.ng(x) {
                        let g = ndarray::Zip::from(&dy)
                            .and(self.val(x))
                            .map_collect(|&d, &v| if v > lo && v < hi { d } else { F::zero() });
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Rope(x, cos, sin) => {
                    let x = *x;
                    if self.ng(x) {
                        let (s, d) = dy.dim();
                        let mut g = Array2::zeros((s, d));
                        for r in 0..s {
                            for j in 0..d / 2 {
                                let (c, sn) = (cos[[r, j]], sin[[r, j]]);
                                let d0 = dy[[r, 2 * j]];
                                let d1 = dy[[r, 2 * j + 1]];
                                g[[r, 2 * j]] = d0 * c + d1 * sn;
                                g[[r, 2 * j + 1]] = -d0 * sn + d1 * c;
                            }
                        }
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut row = 0;
                    for p in parts {
                        let rows = self.shape(p).0;
                        if self.ng(p) {
                            let g = dy.slice(ndarray::s![row..row + rows, ..]).to_owned();
                            acc(&mut grads[p.0], g);
                        }
                        row += rows;
                    }
                }
                Op::SliceRows(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    if self.ng(x) {
                        let (s, d) = self.shape(x);
                        let mut g = Array2::zeros((s, d));
                        g.slice_mut(ndarray::s![start..start + len, ..]).assign(&dy);
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut col = 0;
                    for p in parts {
                        let cols = self.shape(p).1;
                        if self.ng(p) {
                            let g = dy.slice(ndarray::s![.., col..col + cols]).to_owned();
                            acc(&mut grads[p.0], g);
                        }
                        col += cols;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    if self.ng(x) {
                        let (s, d) = self.shape(x);
                        let mut g = Array2::zeros((s, d));
                        g.slice_mut(ndarray::s![.., start..start + len]).assign(&dy);
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let c = dy[[0, 0]];
                        let g = Array2::from_elem(self.shape(x), c);
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    if self.ng(x) {
                        let (s, d) = self.shape(x);
                        let c = dy[[0, 0]] / F::lit((s * d) as f64);
                        let g = Array2::from_elem((s, d), c);
                        acc(&mut grads[x.0], g);
                    }
                }
            }
        }
        grads
    }
}

fn acc<F: Real>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(existing) => *existing = &*existing + &g,
        None => *slot = Some(g),
    }
}

fn gelu_fwd<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(0.7978845608028654); // sqrt(2/pi)
    let k = F::lit(0.044715);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(0.7978845608028654);
    let k = F::lit(0.044715);
    let three = F::lit(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream};

    fn randn(rng: &mut rand_chacha::ChaCha8Rng, s: usize, d: usize) -> Array2<f64> {
        let mut a = Array2::zeros((s, d));
        fill_normal(rng, a.as_slice_mut().unwrap());
        a
    }

    /// Finite-difference check of an arbitrary scalar graph w.r.t. one input.
    fn fd_check<B>(build: B, input: Array2<f64>, tol: f64)
    where
        B: Fn(&mut Tape<f64>, TensorId) -> TensorId,
    {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Arc::new(input.clone()));
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads[x.0].clone().expect("input grad");

        let h = 1e-6;
        for idx in 0..input.len().min(24) {
            let (r, c) = (idx / input.dim().1, idx % input.dim().1);
            let mut plus = input.clone();
            plus[[r, c]] += h;
            let mut minus = input.clone();
            minus[[r, c]] -= h;
            let mut tp = Tape::<f64>::new();
            let xp = tp.param(Arc::new(plus));
            let lp = tp.scalar_val(build(&mut tp, xp));
            let mut tm = Tape::<f64>::new();
            let xm = tm.param(Arc::new(minus));
            let lm = tm.scalar_val(build(&mut tm, xm));
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[[r, c]];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "fd {fd} vs analytic {an} at ({r},{c})"
            );
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = stream(1, 0);
        let w = Arc::new(randn(&mut rng, 4, 3));
        let x0 = randn(&mut rng, 5, 4);
        fd_check(
            move |tp, x| {
                let w = tp.param(w.clone());
                let y = tp.matmul(x, w);
                let y = tp.gelu(y);
                tp.mean_all(y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn grad_attention_like() {
        let mut rng = stream(2, 0);
        let k = Arc::new(randn(&mut rng, 6, 4));
        let v = Arc::new(randn(&mut rng, 6, 4));
        let x0 = randn(&mut rng, 3, 4);
        fd_check(
            move |tp, q| {
                let k = tp.param(k.clone());
                let v = tp.param(v.clone());
                let scores = tp.matmul_tb(q, k);
                let scores = tp.scale(scores, 0.5);
                let attn = tp.softmax(scores);
                let out = tp.matmul(attn, v);
                let out = tp.layer_norm(out, 1e-6);
                tp.mean_all(out)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn grad_norm_modulation_rope() {
        let mut rng = stream(3, 0);
        let s = 4;
        let d = 6;
        let cos = Arc::new(randn(&mut rng, s, d / 2).mapv(f64::cos));
        let sin_t = Arc::new(randn(&mut rng, s, d / 2).mapv(f64::sin));
        let scale = Arc::new(randn(&mut rng, 1, d));
        let shift = Arc::new(randn(&mut rng, 1, d));
        let gate = Arc::new(randn(&mut rng, 1, d));
        let x0 = randn(&mut rng, s, d);
        fd_check(
            move |tp, x| {
                let sc = tp.param(scale.clone());
                let sh = tp.param(shift.clone());
                let g = tp.param(gate.clone());
                let y = tp.layer_norm(x, 1e-6);
                let y = tp.row_affine(y, sc, sh);
                let y = tp.rope(y, cos.clone(), sin_t.clone());
                let y = tp.row_gate(y, g);
                let y = tp.sigmoid(y);
                tp.mean_all(y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn grad_slice_concat_mulcol() {
        let mut rng = stream(4, 0);
        let m = Arc::new(randn(&mut rng, 5, 1).mapv(|v: f64| 1.0 / (1.0 + (-v).exp())));
        let x0 = randn(&mut rng, 5, 6);
        fd_check(
            move |tp, x| {
                let a = tp.slice_rows(x, 0, 2);
                let b = tp.slice_rows(x, 2, 3);
                let joined = tp.concat_rows(&[a, b]);
                let mcol = tp.param(m.clone());
                let gated = tp.mul_col(joined, mcol);
                let c1 = tp.slice_cols(gated, 0, 3);
                let c2 = tp.slice_cols(gated, 3, 3);
                let back = tp.concat_cols(&[c2, c1]);
                let sq = tp.mul(back, back);
                tp.mean_all(sq)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn grad_focal_like_composition() {
        let mut rng = stream(5, 0);
        let x0 = randn(&mut rng, 8, 1);
        fd_check(
            |tp, x| {
                let p = tp.sigmoid(x);
                let p = tp.clamp(p, 1e-6, 1.0 - 1e-6);
                // pretend the first half are positives
                let mut tgt = Array2::zeros((8, 1));
                for i in 0..4 {
                    tgt[[i, 0]] = 1.0;
                }
                let y = tp.constant(tgt);
                // p_t = y*p + (1-y)*(1-p)
                let yp = tp.mul(y, p);
                let ny = tp.scale(y, -1.0);
                let ny = tp.add_const(ny, 1.0);
                let np = tp.scale(p, -1.0);
                let np = tp.add_const(np, 1.0);
                let nyp = tp.mul(ny, np);
                let pt = tp.add(yp, nyp);
                let one_m = tp.scale(pt, -1.0);
                let one_m = tp.add_const(one_m, 1.0);
                let w = tp.pow_const(one_m, 2.0);
                let lg = tp.log(pt);
                let fl = tp.mul(w, lg);
                let fl = tp.scale(fl, -0.25);
                tp.mean_all(fl)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = stream(6, 0);
        let x = randn(&mut rng, 5, 8);
        let angles = randn(&mut rng, 5, 4);
        let cos = Arc::new(angles.mapv(f64::cos));
        let sin = Arc::new(angles.mapv(f64::sin));
        let mut tp = Tape::<f64>::new();
        let xid = tp.constant(x.clone());
        let y = tp.rope(xid, cos, sin);
        for r in 0..5 {
            let n0: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = tp.val(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let mut tp = Tape::<f64>::new();
        let c = tp.constant(Array2::ones((2, 2)));
        let p = tp.param(Arc::new(Array2::ones((2, 2))));
        let y = tp.mul(c, p);
        let l = tp.sum_all(y);
        let grads = tp.backward(l);
        assert!(grads[c.0].is_none());
        assert!(grads[p.0].is_some());
    }
}
