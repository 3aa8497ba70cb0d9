//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! node list in reverse. Values are dense row-major `f32` buffers. Most ops
//! view their operand as a matrix `[rows, cols]` where `cols` is the last
//! dimension.

use std::collections::BTreeMap;

use crate::gemm::{gemm, Layout};
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// An op whose forward pass is computed outside the graph.
///
/// `backward` receives the forward inputs and output together with the
/// gradient of the output, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&[f32]], output: &[f32], grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

enum Value<'p> {
    Owned(Vec<f32>),
    Borrowed(&'p [f32]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f32] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op<'p> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampMax(Var, f32),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    RepeatRows(Var, usize),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
    RowNorm(Var),
    SinusoidalPe {
        x: Var,
        n_freq: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    MseConst {
        x: Var,
        target: Vec<f32>,
    },
    SqDiffMean(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp + 'p>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    shape: Vec<usize>,
    op: Op<'p>,
    requires_grad: bool,
}

/// Geometry of an HWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// The computation tape. Parameters are borrowed from a [`ParamStore`] for
/// the lifetime `'p`, so building a graph never copies weights.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Vec<f32>>>,
    params: BTreeMap<ParamId, Vec<f32>>,
}

impl Grads {
    /// Gradient w.r.t. a graph node, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[f32]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradients summed per parameter, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f32>> {
        self.params
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((last, rest)) => (rest.iter().product(), *last),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const LN_EPS: f32 = 1e-6;

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, op: Op<'p>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value: Value::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let s = self.value(v);
        assert_eq!(s.len(), 1, "node is not a scalar");
        s[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, data: Vec<f32>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "input shape mismatch");
        self.push(data, shape.to_vec(), Op::Input, false)
    }

    /// Input that gradients are computed for (read back via [`Grads::of`]).
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf shape mismatch");
        self.push(data, shape.to_vec(), Op::Input, true)
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.data),
            shape: p.shape.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op<'p>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, self.shape(a).to_vec(), op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op<'p>) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(out, self.shape(a).to_vec(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `x[r, :] + row[0, :]` for every row `r`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (rows, cols) = self.dims(x);
        assert_eq!(self.value(row).len(), cols, "add_row width mismatch");
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..rows {
            for (o, b) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, self.shape(x).to_vec(), Op::AddRow(x, row), rg)
    }

    /// `x[r, :] * row[0, :]` for every row `r`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (rows, cols) = self.dims(x);
        assert_eq!(self.value(row).len(), cols, "mul_row width mismatch");
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..rows {
            for (o, b) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o *= b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, self.shape(x).to_vec(), Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // comparisons rather than max/min so NaN propagates
        self.map(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    /// `min(x, hi)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, hi: f32) -> Var {
        self.map(a, |x| if x > hi { hi } else { x }, Op::ClampMax(a, hi))
    }

    /// `x·w (+ b)` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (rows, fin) = self.dims(x);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "weight must be 2-D");
        assert_eq!(ws[0], fin, "linear input width mismatch");
        let fout = ws[1];
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), fout, "bias width mismatch");
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            fin,
            fout,
            1.0,
            self.value(x),
            Layout::row_major(fin),
            self.value(w),
            Layout::row_major(fout),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            Layout::row_major(fout),
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-scalar input") = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, shape, Op::Linear { x, w, b }, rg)
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::LayerNorm { x, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q: [Tq, d]`, `k: [Tk, d]`, `v: [Tk, d]`. Returns `[Tq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        assert_eq!(d, dk, "q/k width mismatch");
        assert_eq!(self.dims(v), (tk, d), "v shape mismatch");
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
                gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    &qv[h * dh..],
                    Layout::row_major(d),
                    &kv[h * dh..],
                    Layout::transposed(d),
                    0.0,
                    p,
                    Layout::row_major(tk),
                );
                for row in p.chunks_mut(tk) {
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                gemm(
                    tq,
                    tk,
                    dh,
                    1.0,
                    p,
                    Layout::row_major(tk),
                    &vv[h * dh..],
                    Layout::row_major(d),
                    0.0,
                    &mut out[h * dh..],
                    Layout::row_major(d),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            vec![tq, d],
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Each row of `x` repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * cols * times);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.rg(x);
        self.push(out, vec![rows * times, cols], Op::RepeatRows(x, times), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape changes element count"
        );
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape.to_vec(), Op::Reshape(x), rg)
    }

    /// Columns `start..start+len` of the matrix view of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims(x);
        assert!(start + len <= cols, "slice_cols out of range");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(out, vec![rows, len], Op::SliceCols { x, start }, rg)
    }

    /// Rows `start..start+len` of the matrix view of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims(x);
        assert!(start + len <= rows, "slice_rows out of range");
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push(out, vec![len, cols], Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let cols = self.dims(xs[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            assert_eq!(c, cols, "concat_rows width mismatch");
            rows += r;
            out.extend_from_slice(self.value(x));
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, vec![rows, cols], Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let rows = self.dims(xs[0]).0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (r, c) = self.dims(x);
                assert_eq!(r, rows, "concat_cols height mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * c..(r + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, vec![rows, total], Op::ConcatCols(xs.to_vec()), rg)
    }

    /// Each row scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let mut out = xv.to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::NormalizeRows(x), rg)
    }

    /// Euclidean norm of each row, shape `[rows, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let out: Vec<f32> = (0..rows)
            .map(|r| xv[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect();
        let rg = self.rg(x);
        self.push(out, vec![rows, 1], Op::RowNorm(x), rg)
    }

    /// `[n, 3] -> [n, 6·n_freq]`: `sin(2^j x_a)` for `j, a` followed by the
    /// matching cosines.
    pub fn sinusoidal_pe(&mut self, x: Var, n_freq: usize) -> Var {
        let (rows, cols) = self.dims(x);
        assert_eq!(cols, 3, "sinusoidal_pe expects 3-D points");
        let xv = self.value(x);
        let half = 3 * n_freq;
        let mut out = vec![0.0; rows * 2 * half];
        for r in 0..rows {
            for j in 0..n_freq {
                let f = (1u64 << j) as f32;
                for a in 0..3 {
                    let arg = f * xv[r * 3 + a];
                    out[r * 2 * half + j * 3 + a] = arg.sin();
                    out[r * 2 * half + half + j * 3 + a] = arg.cos();
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, vec![rows, 2 * half], Op::SinusoidalPe { x, n_freq }, rg)
    }

    /// 2-D convolution in HWC layout. `w: [k, k, cin, cout]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [h, w, c]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [k, k, cin, cout]");
        assert_eq!(ws[0], ws[1], "square kernels only");
        assert_eq!(ws[2], xs[2], "conv2d channel mismatch");
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ws[3],
            kernel: ws[0],
            stride,
            pad,
        };
        let out = crate::conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let (ho, wo) = geom.out_hw();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, vec![ho, wo, geom.cout], Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f32>();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Mean(x), rg)
    }

    /// Mean squared difference against a constant target.
    pub fn mse_const(&mut self, x: Var, target: Vec<f32>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), target.len(), "mse target length mismatch");
        let s = v
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / v.len() as f32;
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::MseConst { x, target }, rg)
    }

    /// Mean squared difference of two nodes.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "length mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / av.len() as f32;
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![s], vec![1], Op::SqDiffMean(a, b), rg)
    }

    /// Append the result of an externally computed op.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Vec<f32>,
        shape: &[usize],
        op: Box<dyn CustomOp + 'p>,
    ) -> Var {
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(
            output,
            shape.to_vec(),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Vec<f32>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.value(v).len());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_slice();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(x, row) => {
                let cols = self.value(*row).len();
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*row) {
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                let cols = rv.len();
                if self.rg(*x) {
                    let gx: Vec<f32> = g
                        .chunks(cols)
                        .flat_map(|c| c.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*row) {
                    let xv = self.value(*x);
                    let mut gr = vec![0.0; cols];
                    for (gc, xc) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for j in 0..cols {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let gx = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let gx = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Silu(a) => {
                let gx = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Exp(a) => {
                let gx = g.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, gx);
            }
            Op::ClampMax(a, hi) => {
                let gx = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if x < hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Linear { x, w, b } => {
                let (rows, fin) = self.dims(*x);
                let fout = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * fin];
                    gemm(
                        rows,
                        fout,
                        fin,
                        1.0,
                        g,
                        Layout::row_major(fout),
                        self.value(*w),
                        Layout::transposed(fout),
                        0.0,
                        &mut gx,
                        Layout::row_major(fin),
                    );
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; fin * fout];
                    gemm(
                        fin,
                        rows,
                        fout,
                        1.0,
                        self.value(*x),
                        Layout::transposed(fin),
                        g,
                        Layout::row_major(fout),
                        0.0,
                        &mut gw,
                        Layout::row_major(fout),
                    );
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; fout];
                        for chunk in g.chunks(fout) {
                            gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (_, cols) = self.dims(*x);
                let mut gx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &out[r * cols..(r + 1) * cols];
                    let mg = gr.iter().sum::<f32>() / cols as f32;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                    for j in 0..cols {
                        gx[r * cols + j] = rs * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::RepeatRows(x, times) => {
                let (rows, cols) = self.dims(*x);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for t in 0..*times {
                        let src = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                        gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims(*x);
                let len = node.shape[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.dims(*x);
                let mut gx = vec![0.0; rows * cols];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate(grads, x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &x in xs {
                    let c = self.dims(x).1;
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    off += c;
                }
            }
            Op::NormalizeRows(x) => {
                let (rows, cols) = self.dims(*x);
                let xv = self.value(*x);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let yr = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let n = xr.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                    let dot = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f32>();
                    for j in 0..cols {
                        gx[r * cols + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowNorm(x) => {
                let (rows, cols) = self.dims(*x);
                let xv = self.value(*x);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let n = out[r];
                    if n > 0.0 {
                        for j in 0..cols {
                            gx[r * cols + j] = g[r] * xv[r * cols + j] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SinusoidalPe { x, n_freq } => {
                let (rows, _) = self.dims(*x);
                let half = 3 * n_freq;
                let mut gx = vec![0.0; rows * 3];
                for r in 0..rows {
                    for j in 0..*n_freq {
                        let f = (1u64 << j) as f32;
                        for a in 0..3 {
                            let s = out[r * 2 * half + j * 3 + a];
                            let c = out[r * 2 * half + half + j * 3 + a];
                            gx[r * 3 + a] += f
                                * (g[r * 2 * half + j * 3 + a] * c
                                    - g[r * 2 * half + half + j * 3 + a] * s);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = crate::conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::MseConst { x, target } => {
                let xv = self.value(*x);
                let c = 2.0 * g[0] / xv.len() as f32;
                let gx = xv.iter().zip(target).map(|(a, b)| c * (a - b)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SqDiffMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g[0] / av.len() as f32;
                let d: Vec<f32> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.iter().map(|x| -x).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[f32]> = inputs.iter().map(|&x| self.value(x)).collect();
                let gs = op.backward(&ins, out, g);
                assert_eq!(gs.len(), inputs.len(), "{}: wrong gradient count", op.name());
                for (&x, gx) in inputs.iter().zip(gs) {
                    if let Some(gx) = gx {
                        self.accumulate(grads, x, gx);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (tq, d) = self.dims(q);
        let tk = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; tq * d];
        let mut gk = vec![0.0; tk * d];
        let mut gv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            // dV_h = Pᵀ · dO_h
            gemm(
                tk,
                tq,
                dh,
                1.0,
                p,
                Layout::transposed(tk),
                &g[h * dh..],
                Layout::row_major(d),
                0.0,
                &mut gv[h * dh..],
                Layout::row_major(d),
            );
            // dP = dO_h · V_hᵀ
            gemm(
                tq,
                dh,
                tk,
                1.0,
                &g[h * dh..],
                Layout::row_major(d),
                &vv[h * dh..],
                Layout::transposed(d),
                0.0,
                &mut dp,
                Layout::row_major(tk),
            );
            // softmax backward, in place: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                let dot = dr.iter().zip(pr).map(|(a, b)| a * b).sum::<f32>();
                dr.iter_mut().zip(pr).for_each(|(a, b)| *a = b * (*a - dot));
            }
            gemm(
                tq,
                tk,
                dh,
                scale,
                &dp,
                Layout::row_major(tk),
                &kv[h * dh..],
                Layout::row_major(d),
                0.0,
                &mut gq[h * dh..],
                Layout::row_major(d),
            );
            gemm(
                tk,
                tq,
                dh,
                scale,
                &dp,
                Layout::transposed(tk),
                &qv[h * dh..],
                Layout::row_major(d),
                0.0,
                &mut gk[h * dh..],
                Layout::row_major(d),
            );
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}
