//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node. Values are
//! computed eagerly; [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. All tensors on the tape are viewed
//! as `rows × cols` matrices.

use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: F,
        probs: Vec<F>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Gather { x: Var, idx: Vec<usize> },
    DwConv { x: Var, kernel: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    BroadcastRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    StraightThrough(Var),
    /// Scalar output whose local gradients were computed during the forward pass.
    Precomputed(Vec<(Var, Vec<F>)>),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'p, F: Scalar> {
    params: Option<&'p ParamSet<F>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Scalar> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Tape<'p, F> {
    /// A tape without parameters; only inputs can be differentiated.
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            track_params: false,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<F>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            track_params: true,
            nodes: Vec::new(),
        }
    }

    /// Parameters are read but not differentiated (inference).
    pub fn frozen(params: &'p ParamSet<F>) -> Self {
        Self {
            track_params: false,
            ..Self::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node on a tape without params")
                .get(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    /// Copies a node's value out as a standalone matrix tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_len(op: &'static str, rows: usize, cols: usize, data: &[F]) -> Result<()> {
        if rows * cols != data.len() {
            return Err(Error::dim(op, format!("{rows}x{cols}"), data.len()));
        }
        Ok(())
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        Self::check_len("constant", rows, cols, &data)?;
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        Self::check_len("input", rows, cols, &data)?;
        Ok(self.push(rows, cols, data, Op::Leaf, true))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.expect("tape has no params").get(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Detached copy of `x`: same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let d = self.value(x).to_vec();
        self.push(r, c, d, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner {k}"), format!("inner {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, node, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_op(&mut self, op: &'static str, x: Var, r: Var, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(r) != (1, n) {
            return Err(Error::dim(op, format!("(1, {n})"), format!("{:?}", self.shape(r))));
        }
        let rv = self.value(r);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (a, &b) in row.iter_mut().zip(rv) {
                *a = f(*a, b);
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(m, n, out, node, ng))
    }

    /// `x[i, j] + r[0, j]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_op("add_row", x, r, |a, b| a + b, Op::AddRow(x, r))
    }

    /// `x[i, j] * r[0, j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_op("mul_row", x, r, |a, b| a * b, Op::MulRow(x, r))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v + s).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, Op::AddScalar(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, Op::Gelu(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.sqrt()).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, Op::Sqrt(x), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_plain(&mut self, x: Var, eps: F) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(Error::EmptyDimension { op: "layer_norm" });
        }
        let nf = F::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let ng = self.ng(x);
        Ok(self.push(m, n, out, Op::LayerNorm { x, inv_std }, ng))
    }

    /// Layer normalization with optional per-column gain and bias (`1 × D`).
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: F) -> Result<Var> {
        let mut y = self.layer_norm_plain(x, eps)?;
        if let Some(g) = gain {
            y = self.mul_row(y, g)?;
        }
        if let Some(b) = bias {
            y = self.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(Error::EmptyDimension { op: "softmax" });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(m, n, out, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(Error::EmptyDimension { op: "log_softmax" });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(m, n, out, Op::LogSoftmax(x), ng))
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq × (heads·dh)`,
    /// `k` and `v` are `Tk × (heads·dh)`. With `causal`, query `i` only sees keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, dq) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        if dq != dk || dq != dv || tk != tv {
            return Err(Error::dim(
                "attention",
                format!("q {tq}x{dq}, k/v matching"),
                format!("k {tk}x{dk}, v {tv}x{dv}"),
            ));
        }
        if heads == 0 || dq % heads != 0 {
            return Err(Error::dim("attention", format!("width divisible by {heads} heads"), dq));
        }
        if tq == 0 || tk == 0 {
            return Err(Error::EmptyDimension { op: "attention" });
        }
        if causal && tq != tk {
            return Err(Error::dim("attention", "square causal attention", format!("{tq}x{tk}")));
        }
        let dh = dq / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * dq];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let ld = dq as isize;
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            F::gemm(
                tq,
                dh,
                tk,
                scale,
                &qv[h * dh..],
                ld,
                1,
                &kv[h * dh..],
                1,
                ld,
                F::zero(),
                p,
                tk as isize,
                1,
            );
            for (i, row) in p.chunks_mut(tk).enumerate() {
                if causal {
                    for s in row.iter_mut().skip(i + 1) {
                        *s = F::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            F::gemm(
                tq,
                tk,
                dh,
                F::one(),
                p,
                tk as isize,
                1,
                &vv[h * dh..],
                ld,
                1,
                F::zero(),
                &mut out[h * dh..],
                ld,
                1,
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            tq,
            dq,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Rotary position embedding applied per head on `(j, j + dh/2)` pairs.
    /// Positions may be fractional.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[f64], base: f64) -> Result<Var> {
        let (t, d) = self.shape(x);
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::dim("rope", format!("even head width with {heads} heads"), d));
        }
        if positions.len() != t {
            return Err(Error::dim("rope", t, positions.len()));
        }
        let dh = d / heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / dh as f64);
                let a = p * freq;
                cos.push(F::from_f64_lossy(a.cos()));
                sin.push(F::from_f64_lossy(a.sin()));
            }
        }
        let mut out = self.value(x).to_vec();
        rotate(&mut out, t, d, heads, half, &cos, &sin, false);
        let ng = self.ng(x);
        Ok(self.push(t, d, out, Op::Rope { x, heads, cos, sin }, ng))
    }

    /// Selects rows of `x` (embedding lookup, masked-frame selection).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Validation(format!("row index {bad} out of range for {m} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(idx.len(), n, out, Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    /// Depthwise 1-D convolution along rows with zero "same" padding.
    /// `x` is `L × C`, `kernel` is `K × C` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (l, c) = self.shape(x);
        let (kk, kc) = self.shape(kernel);
        if kc != c || kk % 2 == 0 {
            return Err(Error::dim("depthwise_conv1d", format!("odd K x {c}"), format!("{kk}x{kc}")));
        }
        let pad = kk / 2;
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![F::zero(); l * c];
        for t in 0..l {
            let orow = &mut out[t * c..(t + 1) * c];
            for j in 0..kk {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xr = &xv[src as usize * c..(src as usize + 1) * c];
                let kr = &kv[j * c..(j + 1) * c];
                for ((o, &a), &b) in orow.iter_mut().zip(xr).zip(kr) {
                    *o = *o + a * b;
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(l, c, out, Op::DwConv { x, kernel }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.rows(p)).ok_or(Error::EmptyDimension { op: "concat_cols" })?;
        if let Some(&p) = parts.iter().find(|&&p| self.rows(p) != m) {
            return Err(Error::dim("concat_cols", m, self.rows(p)));
        }
        let n: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.cols(p)).ok_or(Error::EmptyDimension { op: "concat_rows" })?;
        if let Some(&p) = parts.iter().find(|&&p| self.cols(p) != n) {
            return Err(Error::dim("concat_rows", n, self.cols(p)));
        }
        let m: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(Error::dim("slice_rows", format!("rows <= {m}"), start + len));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(len, n, out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::dim("slice_cols", format!("cols <= {n}"), start + len));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(m, len, out, Op::SliceCols { x, start }, ng))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m != 1 {
            return Err(Error::dim("broadcast_rows", "1 row", m));
        }
        let row = self.value(x).to_vec();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(&row);
        }
        let ng = self.ng(x);
        Ok(self.push(rows, n, out, Op::BroadcastRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyDimension { op: "mean" });
        }
        let s = self.value(x).iter().copied().sum::<F>() / F::from_usize(n).unwrap();
        let ng = self.ng(x);
        Ok(self.push(1, 1, vec![s], Op::MeanAll(x), ng))
    }

    /// Per-row sum, `m × n → m × 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .map(|r| r.iter().copied().sum())
            .collect::<Vec<F>>();
        let out = if n == 0 { vec![F::zero(); m] } else { out };
        let ng = self.ng(x);
        self.push(m, 1, out, Op::RowSum(x), ng)
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Vec<F>) -> Result<Var> {
        let (m, n) = self.shape(x);
        Self::check_len("straight_through", m, n, &replacement)?;
        let ng = self.ng(x);
        Ok(self.push(m, n, replacement, Op::StraightThrough(x), ng))
    }

    /// Scalar node with externally computed local gradients `∂out/∂input`.
    pub fn precomputed(&mut self, value: F, locals: Vec<(Var, Vec<F>)>) -> Result<Var> {
        for (v, g) in &locals {
            let (r, c) = self.shape(*v);
            Self::check_len("precomputed", r, c, g)?;
        }
        let ng = locals.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(1, 1, vec![value], Op::Precomputed(locals), ng))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::dim("backward", "(1, 1)", format!("{:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let out = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => &[],
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let k = self.cols(*a);
                if self.ng(*a) {
                    let da = self.acc(grads, *a);
                    F::gemm(m, n, k, F::one(), g, n as isize, 1, self.value(*b), 1, n as isize, F::one(), da, k as isize, 1);
                }
                if self.ng(*b) {
                    let db = self.acc(grads, *b);
                    F::gemm(k, m, n, F::one(), self.value(*a), 1, k as isize, g, n as isize, 1, F::one(), db, n as isize, 1);
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.add_into(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi));
                self.add_into(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.add_into(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi));
                self.add_into(
                    grads,
                    *b,
                    g.iter().zip(av).zip(bv).map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi)),
                );
            }
            Op::AddRow(x, r) => {
                self.add_into(grads, *x, g.iter().copied());
                if self.ng(*r) {
                    let dr = self.acc(grads, *r);
                    for row in g.chunks(n) {
                        for (d, &v) in dr.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r);
                if self.ng(*x) {
                    let it = g.chunks(n).flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| a * b));
                    self.add_into(grads, *x, it);
                }
                if self.ng(*r) {
                    let xv = self.value(*x);
                    let dr = self.acc(grads, *r);
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for ((d, &gv), &xv) in dr.iter_mut().zip(grow).zip(xrow) {
                            *d = *d + gv * xv;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.add_into(grads, *x, g.iter().map(|&v| v * *s)),
            Op::AddScalar(x) => self.add_into(grads, *x, g.iter().copied()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.add_into(grads, *x, g.iter().zip(xv).map(|(&gi, &xi)| gi * gelu_grad(xi)));
            }
            Op::Sqrt(x) => {
                let two = F::one() + F::one();
                self.add_into(grads, *x, g.iter().zip(out).map(|(&gi, &yi)| gi / (two * yi)));
            }
            Op::LayerNorm { x, inv_std } => {
                let nf = F::from_usize(n).unwrap();
                let mut dx = Vec::with_capacity(m * n);
                for ((grow, yrow), &is) in g.chunks(n).zip(out.chunks(n)).zip(inv_std) {
                    let mg = grow.iter().copied().sum::<F>() / nf;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| is * (gi - mg - yi * mgy)));
                }
                self.add_into(grads, *x, dx.into_iter());
            }
            Op::Softmax(x) => {
                let mut dx = Vec::with_capacity(m * n);
                for (grow, yrow) in g.chunks(n).zip(out.chunks(n)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>();
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                self.add_into(grads, *x, dx.into_iter());
            }
            Op::LogSoftmax(x) => {
                let mut dx = Vec::with_capacity(m * n);
                for (grow, yrow) in g.chunks(n).zip(out.chunks(n)) {
                    let s = grow.iter().copied().sum::<F>();
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| gi - yi.exp() * s));
                }
                self.add_into(grads, *x, dx.into_iter());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.attention_backward(g, grads, *q, *k, *v, *heads, *scale, probs),
            Op::Rope { x, heads, cos, sin } => {
                let mut dx = g.to_vec();
                let half = n / heads / 2;
                rotate(&mut dx, m, n, *heads, half, cos, sin, true);
                self.add_into(grads, *x, dx.into_iter());
            }
            Op::Gather { x, idx } => {
                if self.ng(*x) {
                    let dx = self.acc(grads, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, &v) in dx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::DwConv { x, kernel } => {
                let (kk, _) = self.shape(*kernel);
                let pad = kk / 2;
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let mut dx = vec![F::zero(); m * n];
                let mut dk = vec![F::zero(); kk * n];
                for t in 0..m {
                    let grow = &g[t * n..(t + 1) * n];
                    for j in 0..kk {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= m as isize {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..n {
                            dx[s * n + c] = dx[s * n + c] + grow[c] * kv[j * n + c];
                            dk[j * n + c] = dk[j * n + c] + grow[c] * xv[s * n + c];
                        }
                    }
                }
                self.add_into(grads, *x, dx.into_iter());
                self.add_into(grads, *kernel, dk.into_iter());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if self.ng(p) {
                        let it = (0..m).flat_map(|r| g[r * n + offset..r * n + offset + c].iter().copied());
                        self.add_into(grads, p, it);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.rows(p) * n;
                    self.add_into(grads, p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let dx = self.acc(grads, *x);
                    for (d, &v) in dx[start * n..(start + m) * n].iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let full = self.cols(*x);
                    let dx = self.acc(grads, *x);
                    for r in 0..m {
                        for c in 0..n {
                            let d = &mut dx[r * full + start + c];
                            *d = *d + g[r * n + c];
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                if self.ng(*x) {
                    let dx = self.acc(grads, *x);
                    for row in g.chunks(n) {
                        for (d, &v) in dx.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let len = self.value(*x).len();
                self.add_into(grads, *x, std::iter::repeat_n(g[0], len));
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let v = g[0] / F::from_usize(len).unwrap();
                self.add_into(grads, *x, std::iter::repeat_n(v, len));
            }
            Op::RowSum(x) => {
                let c = self.cols(*x);
                self.add_into(grads, *x, g.iter().flat_map(|&v| std::iter::repeat_n(v, c)));
            }
            Op::StraightThrough(x) => self.add_into(grads, *x, g.iter().copied()),
            Op::Precomputed(locals) => {
                for (v, lg) in locals {
                    self.add_into(grads, *v, lg.iter().map(|&l| l * g[0]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: F,
        probs: &[F],
    ) {
        let (tq, d) = self.shape(q);
        let tk = self.rows(k);
        let dh = d / heads;
        let ld = d as isize;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![F::zero(); tq * d];
        let mut dk = vec![F::zero(); tk * d];
        let mut dv = vec![F::zero(); tk * d];
        let mut ds = vec![F::zero(); tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            // dV = Pᵀ·dO
            F::gemm(tk, tq, dh, F::one(), p, 1, tk as isize, &g[h * dh..], ld, 1, F::zero(), &mut dv[h * dh..], ld, 1);
            // dP = dO·Vᵀ
            F::gemm(tq, dh, tk, F::one(), &g[h * dh..], ld, 1, &vv[h * dh..], 1, ld, F::zero(), &mut ds, tk as isize, 1);
            for (drow, prow) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            F::gemm(tq, tk, dh, scale, &ds, tk as isize, 1, &kv[h * dh..], ld, 1, F::zero(), &mut dq[h * dh..], ld, 1);
            F::gemm(tk, tq, dh, scale, &ds, 1, tk as isize, &qv[h * dh..], ld, 1, F::zero(), &mut dk[h * dh..], ld, 1);
        }
        self.add_into(grads, q, dq.into_iter());
        self.add_into(grads, k, dk.into_iter());
        self.add_into(grads, v, dv.into_iter());
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut Vec<F> {
        let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
        grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn add_into(&self, grads: &mut [Option<Vec<F>>], v: Var, it: impl Iterator<Item = F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => {
                for (a, b) in d.iter_mut().zip(it) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(it.collect()),
        }
    }

    /// Adds this tape's parameter gradients into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_param_grads(&self, grads: &Gradients<F>, acc: &mut [Vec<F>]) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            let Some(g) = var.and_then(|v| grads.wrt(v)) else {
                continue;
            };
            let dst = &mut acc[pid];
            if dst.is_empty() {
                dst.resize(g.len(), F::zero());
            }
            for (a, &b) in dst.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }

    /// Gradient of a parameter, if it took part in the computation.
    pub fn param_grad<'g>(&self, grads: &'g Gradients<F>, id: ParamId) -> Option<&'g [F]> {
        self.param_vars[id.0].and_then(|v| grads.wrt(v))
    }
}

/// Result of a reverse pass.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate<F: Scalar>(
    data: &mut [F],
    rows: usize,
    cols: usize,
    heads: usize,
    half: usize,
    cos: &[F],
    sin: &[F],
    inverse: bool,
) {
    let dh = cols / heads;
    for t in 0..rows {
        let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
        for h in 0..heads {
            let base = t * cols + h * dh;
            for j in 0..half {
                let (a, b) = (data[base + j], data[base + j + half]);
                let sj = if inverse { -s[j] } else { s[j] };
                data[base + j] = a * c[j] - b * sj;
                data[base + j + half] = a * sj + b * c[j];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5·(1 + tanh(u))` written as the logistic `σ(2u)`; libm `exp` is much
/// faster than `tanh` for f32.
fn half_one_plus_tanh<F: Scalar>(u: F) -> F {
    F::one() / (F::one() + (-(u + u)).exp())
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    x * half_one_plus_tanh(c * (x + a * x * x * x))
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let two = F::from_f64_lossy(2.0);
    let three = F::from_f64_lossy(3.0);
    // with s = σ(2u): d/dx [x·s] = s + x·2s(1 − s)·u'
    let s = half_one_plus_tanh(c * (x + a * x * x * x));
    s + x * two * s * (F::one() - s) * c * (F::one() + three * a * x * x)
}

/// Numerically stable in-place softmax. Rows of all `-inf` are left as zeros.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}
