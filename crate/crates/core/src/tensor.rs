//! Dense f32 tensors and a define-by-run gradient tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Leaves
//! either own their value or borrow it (model weights are borrowed so a forward
//! pass never copies them). [`Tape::backward`] walks the recorded nodes in
//! reverse insertion order, which is a valid reverse topological order because
//! an operation can only reference nodes that already exist.
//!
//! Only the shapes the transformer needs are supported: 2-D matrix products,
//! row-wise softmax and layer norm, a bias add over the last dimension, and row
//! and column slicing/concatenation. There is no general broadcasting.

use std::borrow::Cow;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1 × n]` row vector.
    pub fn row_vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place optimizer updates.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            _ => Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    /// Row softmax with an optional causal offset; masked entries are exactly zero.
    Softmax(Var, Option<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
}

/// Shape bookkeeping of a grouped causal attention node.
#[derive(Debug, Clone, Copy)]
struct AttnLayout {
    groups: usize,
    heads: usize,
    /// Query rows per group.
    t: usize,
    /// Prefix key rows per group.
    p: usize,
    d: usize,
}

impl AttnLayout {
    fn keys(&self) -> usize {
        self.p + self.t
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Offset of the probability row for (group, head, query).
    fn prob_row(&self, g: usize, h: usize, i: usize) -> usize {
        ((g * self.heads + h) * self.t + i) * self.keys()
    }
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves that requested them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }
}

/// Define-by-run operation recorder. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    // Branch-free scan over the exponent bits so the loop vectorizes.
    const EXP: u32 = 0x7f80_0000;
    let bad = data.iter().fold(0u32, |acc, v| acc | ((v.to_bits() & EXP) == EXP) as u32);
    if bad == 0 {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    sgemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    sgemm(a, (k, 1), b, (1, k), c, m, k, n);
}

/// Backward-pass products accumulate in f64 and round once into `c`, so a
/// gradient that is a cancelling sum keeps its relative accuracy.
#[allow(clippy::too_many_arguments)]
fn gemm_wide(
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let a: Vec<f64> = a[..m * k].iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b[..k * n].iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; m * n];
    // SAFETY: as in `sgemm`, over the widened copies of the same views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for (c, o) in c.iter_mut().zip(out) {
        *c += o as f32;
    }
}

/// `c[m×n] += A · B` where `A` is `m×k` and `B` is `k×n`, each given by
/// (row stride, column stride) into its buffer.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe in-bounds row-major views of `a`, `b` and `c`,
    // whose lengths are checked by every caller against the shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// The nonlinear and reducing ops below work in f64 internally and round once
// on the way out. Their backward passes recompute or keep f64 intermediates,
// so cancellation in `p·(g − Σpg)` style terms stays out of the gradients.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax of the first `visible` entries of `row`; the rest are zero.
fn softmax_f64(row: &[f32], visible: usize) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    softmax_in_place(&mut out, visible);
    out
}

fn softmax_in_place(row: &mut [f64], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in live.iter_mut() {
        *v /= sum;
    }
    masked.fill(0.0);
}

fn softmax_visible(offset: Option<usize>, row: usize, n: usize) -> usize {
    match offset {
        Some(o) => (row + o + 1).min(n),
        None => n,
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a borrowed leaf; used for weights so they are never copied.
    pub fn param(&mut self, value: &'w Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Cow<'w, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, &value.data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 || av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&av.data, &bv.data, &mut out, m, k, n);
        self.emit(
            "matmul",
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_t")?;
        let (n, k2) = bv.dims2("matmul_t")?;
        if k != k2 || av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul_t",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&av.data, &bv.data, &mut out, m, k, n);
        self.emit(
            "matmul_t",
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulT(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data[i * n + j];
            }
        }
        self.emit(
            "transpose",
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(x),
            &[x],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::Shape {
                op,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor {
            shape: av.shape.clone(),
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.emit("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.emit("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.emit("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector over the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            for (v, &b) in row.iter_mut().zip(&bv.data) {
                *v += b;
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.emit("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        self.emit("scale", out, Op::Scale(x, s), &[x])
    }

    /// GPT-2 tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| gelu(v as f64) as f32).collect(),
        };
        self.emit("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax under a causal mask: row `i` attends to columns `0..=i + offset`.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        self.softmax_impl(x, Some(offset))
    }

    fn softmax_impl(&mut self, x: Var, offset: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        check_finite("softmax_rows", &xv.data)?;
        let n = xv.cols().max(1);
        let data = xv
            .data
            .chunks(n)
            .enumerate()
            .flat_map(|(i, row)| softmax_f64(row, softmax_visible(offset, i, n)))
            .map(|v| v as f32)
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.emit("softmax_rows", out, Op::Softmax(x, offset), &[x])
    }

    /// Multi-head causal self-attention over `groups` independent sequences
    /// stacked row-wise. `q`, `k` and `v` hold `t` rows per group; `prefix`
    /// optionally supplies `p` earlier key and value rows per group. Query `i`
    /// of a group attends to its `p` prefix keys and tail keys `0..=i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dims2("causal_attention")?;
        if kv.shape != qv.shape
            || vv.shape != qv.shape
            || groups == 0
            || rows % groups != 0
            || heads == 0
            || d % heads != 0
        {
            return Err(TensorError::Shape {
                op: "causal_attention",
                lhs: qv.shape.clone(),
                rhs: kv.shape.clone(),
            });
        }
        let t = rows / groups;
        let p = match prefix {
            Some((kp, vp)) => {
                let (kpv, vpv) = (self.value(kp), self.value(vp));
                let (prow, pd) = kpv.dims2("causal_attention")?;
                if vpv.shape != kpv.shape || pd != d || prow % groups != 0 {
                    return Err(TensorError::Shape {
                        op: "causal_attention",
                        lhs: qv.shape.clone(),
                        rhs: kpv.shape.clone(),
                    });
                }
                prow / groups
            }
            None => 0,
        };
        let layout = AttnLayout {
            groups,
            heads,
            t,
            p,
            d,
        };
        let (kp, vp) = match prefix {
            Some((a, b)) => (&self.value(a).data[..], &self.value(b).data[..]),
            None => (&[][..], &[][..]),
        };
        let key_row = |g: usize, j: usize| -> usize {
            if j < p {
                (g * p + j) * d
            } else {
                (g * t + j - p) * d
            }
        };
        let hd = layout.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let nk = layout.keys();
        let mut probs = vec![0.0f64; groups * heads * t * nk];
        let mut out = vec![0.0f64; rows * d];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..t {
                    let qrow = &qv.data[(g * t + i) * d + c0..(g * t + i) * d + c0 + hd];
                    let prow = layout.prob_row(g, h, i);
                    let visible = p + i + 1;
                    let row = &mut probs[prow..prow + nk];
                    for (j, s) in row[..visible].iter_mut().enumerate() {
                        let src = if j < p { kp } else { &kv.data[..] };
                        let off = key_row(g, j) + c0;
                        *s = qrow
                            .iter()
                            .zip(&src[off..off + hd])
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            * scale;
                    }
                    softmax_in_place(row, visible);
                    let orow = &mut out[(g * t + i) * d + c0..(g * t + i) * d + c0 + hd];
                    for (j, &a) in row[..visible].iter().enumerate() {
                        let src = if j < p { vp } else { &vv.data[..] };
                        let off = key_row(g, j) + c0;
                        for (o, &x) in orow.iter_mut().zip(&src[off..off + hd]) {
                            *o += a * x as f64;
                        }
                    }
                }
            }
        }
        let out = Tensor {
            shape: vec![rows, d],
            data: out.into_iter().map(|v| v as f32).collect(),
        };
        let mut inputs = vec![q, k, v];
        if let Some((a, b)) = prefix {
            inputs.extend([a, b]);
        }
        self.emit(
            "causal_attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                layout,
                probs,
            },
            &inputs,
        )
    }

    /// Layer norm over the last dimension followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.numel() != n || bv.numel() != n {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: xv.shape.clone(),
                rhs: gv.shape.clone(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0f64; xv.numel()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] as f64 - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = (h * gv.data[j] as f64 + bv.data[j] as f64) as f32;
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data: out,
        };
        self.emit(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean cross-entropy of `targets[r]` under row `r` of `logits`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.cols();
        let rows = lv.rows();
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                len: v,
            });
        }
        check_finite("cross_entropy", &lv.data)?;
        let mut probs: Vec<f64> = lv.data.iter().map(|&x| x as f64).collect();
        let mut loss = 0.0f64;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            softmax_in_place(row, v);
        }
        let out = Tensor::scalar((loss / rows as f64) as f32);
        self.emit(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `−log softmax(logits)[target]` for a single distribution.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.value(logits).rows() != 1 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![1],
            });
        }
        self.cross_entropy_rows(logits, &[target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum::<f32>();
        self.emit("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let out = Tensor {
            shape: vec![len, n],
            data: xv.data[start * n..(start + len) * n].to_vec(),
        };
        self.emit("slice_rows", out, Op::SliceRows(x, start), &[x])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data[r * n + start..r * n + start + len]);
        }
        let out = Tensor {
            shape: vec![m, len],
            data,
        };
        self.emit("slice_cols", out, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n || pv.shape.len() > 2 {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: pv.shape.clone(),
                });
            }
            m += pv.rows();
            data.extend_from_slice(&pv.data);
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        self.emit("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != m || pv.shape.len() > 2 {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: pv.shape.clone(),
                });
            }
            widths.push(pv.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        self.emit("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Embedding lookup: stacks `table[ids[i]]` into an `[ids.len() × d]` tensor.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        self.emit(
            "gather_rows",
            out,
            Op::Gather(table, ids.to_vec()),
            &[table],
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// with `requires_grad`; intermediate gradients are dropped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients::default());
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((
                    Var(idx),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    },
                ));
            }
        }
        leaf_grads.reverse();
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, node: &Node<'w>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2("matmul").unwrap();
                let n = bv.cols();
                if wants(*a) {
                    acc(*a, &mut |buf| gemm_wide(g, (n, 1), &bv.data, (1, n), buf, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |buf| gemm_wide(&av.data, (1, k), g, (n, 1), buf, k, m, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2("matmul_t").unwrap();
                let n = bv.rows();
                if wants(*a) {
                    acc(*a, &mut |buf| gemm_wide(g, (n, 1), &bv.data, (k, 1), buf, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |buf| gemm_wide(g, (1, n), &av.data, (k, 1), buf, n, m, k));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2("transpose").unwrap();
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (x, &y) in buf.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    let n = buf.len();
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| {
                for (v, &gv) in buf.iter_mut().zip(g) {
                    *v += s * gv;
                }
            }),
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += (g[i] as f64 * gelu_grad(xv[i] as f64)) as f32;
                    }
                });
            }
            Op::Softmax(x, offset) => {
                let xv = &nodes[x.0].value;
                let n = xv.cols().max(1);
                acc(*x, &mut |buf| {
                    for (i, ((brow, xrow), grow)) in
                        buf.chunks_mut(n).zip(xv.data.chunks(n)).zip(g.chunks(n)).enumerate()
                    {
                        let y = softmax_f64(xrow, softmax_visible(*offset, i, n));
                        let dot: f64 = y.iter().zip(grow).map(|(&a, &b)| a * b as f64).sum();
                        for j in 0..n {
                            brow[j] += (y[j] * (grow[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = &nodes[gain.0].value.data;
                let n = gv.len();
                acc(*x, &mut |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh = |j: usize| grow[j] as f64 * gv[j] as f64;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for (j, h) in hrow.iter().enumerate() {
                            s1 += dh(j);
                            s2 += dh(j) * h;
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            buf[r * n + j] += (is / nf * (nf * dh(j) - s1 - hrow[j] * s2)) as f32;
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    let mut acc = vec![0.0f64; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            acc[j] += grow[j] as f64 * hrow[j];
                        }
                    }
                    for (b, a) in buf.iter_mut().zip(acc) {
                        *b += a as f32;
                    }
                });
                acc(*bias, &mut |buf| {
                    for grow in g.chunks(n) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] as f64 / targets.len() as f64;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let target = if j == t { 1.0 } else { 0.0 };
                            buf[r * v + j] += (scale * (probs[r * v + j] - target)) as f32;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| {
                for v in buf.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::SliceRows(x, start) => {
                let n = node.value.cols();
                acc(*x, &mut |buf| {
                    add_into(&mut buf[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols(x, start) => {
                let len = node.value.cols();
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |buf| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &mut |buf| {
                        for (r, brow) in buf.chunks_mut(w).enumerate() {
                            add_into(brow, &g[r * n + col..r * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                prefix,
                layout,
                probs,
            } => {
                let AttnLayout {
                    groups,
                    heads,
                    t,
                    p,
                    d,
                } = *layout;
                let hd = layout.head_dim();
                let nk = layout.keys();
                let scale = 1.0 / (hd as f64).sqrt();
                let qd: &[f32] = &nodes[q.0].value.data;
                let kd: &[f32] = &nodes[k.0].value.data;
                let vd: &[f32] = &nodes[v.0].value.data;
                let (kpd, vpd): (&[f32], &[f32]) = match prefix {
                    Some((a, b)) => (&nodes[a.0].value.data, &nodes[b.0].value.data),
                    None => (&[], &[]),
                };
                let mut dq = vec![0.0f64; qd.len()];
                let mut dk = vec![0.0f64; kd.len()];
                let mut dv = vec![0.0f64; vd.len()];
                let mut dkp = vec![0.0f64; kpd.len()];
                let mut dvp = vec![0.0f64; vpd.len()];
                let mut ds = vec![0.0f64; nk];
                for gi in 0..groups {
                    for h in 0..heads {
                        let c0 = h * hd;
                        for i in 0..t {
                            let r = (gi * t + i) * d + c0;
                            let go = &g[r..r + hd];
                            let a = &probs[layout.prob_row(gi, h, i)..][..nk];
                            let visible = p + i + 1;
                            let mut dot = 0.0f64;
                            for j in 0..visible {
                                let (vsrc, off) = if j < p {
                                    (vpd, (gi * p + j) * d + c0)
                                } else {
                                    (vd, (gi * t + j - p) * d + c0)
                                };
                                let da: f64 = go
                                    .iter()
                                    .zip(&vsrc[off..off + hd])
                                    .map(|(&x, &y)| x as f64 * y as f64)
                                    .sum();
                                ds[j] = da;
                                dot += da * a[j];
                                let dvbuf = if j < p {
                                    &mut dvp[off..off + hd]
                                } else {
                                    &mut dv[off..off + hd]
                                };
                                for (o, &x) in dvbuf.iter_mut().zip(go) {
                                    *o += a[j] * x as f64;
                                }
                            }
                            for j in 0..visible {
                                let s = a[j] * (ds[j] - dot) * scale;
                                let (ksrc, off) = if j < p {
                                    (kpd, (gi * p + j) * d + c0)
                                } else {
                                    (kd, (gi * t + j - p) * d + c0)
                                };
                                for (o, &x) in dq[r..r + hd].iter_mut().zip(&ksrc[off..off + hd]) {
                                    *o += s * x as f64;
                                }
                                let dkbuf = if j < p {
                                    &mut dkp[off..off + hd]
                                } else {
                                    &mut dk[off..off + hd]
                                };
                                for (o, &x) in dkbuf.iter_mut().zip(&qd[r..r + hd]) {
                                    *o += s * x as f64;
                                }
                            }
                        }
                    }
                }
                let add_f64 = |buf: &mut [f32], src: &[f64]| {
                    for (b, s) in buf.iter_mut().zip(src) {
                        *b += *s as f32;
                    }
                };
                acc(*q, &mut |buf| add_f64(buf, &dq));
                acc(*k, &mut |buf| add_f64(buf, &dk));
                acc(*v, &mut |buf| add_f64(buf, &dv));
                if let Some((a, b)) = prefix {
                    acc(*a, &mut |buf| add_f64(buf, &dkp));
                    acc(*b, &mut |buf| add_f64(buf, &dvp));
                }
            }
            Op::Gather(table, ids) => {
                let d = node.value.cols();
                acc(*table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adaptive-moment optimizer state for a list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` must match the sizes
    /// given at construction; a `None` gradient leaves that parameter alone.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<&[f32]>]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                p[j] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
