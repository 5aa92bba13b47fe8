//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter the
//! tape through [`Graph::param`]; [`Graph::backward`] walks the tape once in
//! reverse and accumulates into the gradient slots of the [`ParamStore`].

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather pattern for windowed attention: `width` key indices per query row.
/// Invalid slots are blocked in the softmax.
#[derive(Clone, Debug)]
pub struct Window {
    pub width: usize,
    pub idx: Vec<usize>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Powf(Var, f64),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    RepeatRows(Var, usize),
    MeanRowGroups(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    SumRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    HeadLogits {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    AddHeadBias(Var, Var),
    HeadMix {
        w: Var,
        v: Var,
        heads: usize,
    },
    WindowLogits {
        q: Var,
        k: Var,
        win: Rc<Window>,
        heads: usize,
        scale: f64,
    },
    WindowMix {
        w: Var,
        v: Var,
        win: Rc<Window>,
        heads: usize,
    },
    HeadsToPairs(Var),
    MaskLogits {
        e: Var,
        f: Var,
        w: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn head_block(src: &[f64], rows: usize, cols: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * cols + h * dh..r * cols + (h + 1) * dh]);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Parameter leaf; repeated requests for the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.index_of(name)?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let v = self.push(store.by_index(idx).value.clone(), Op::Param(idx), true);
        self.params.insert(idx, v);
        Ok(v)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.cols();
        if tr.len() != c {
            return Err(shape_err(name, format!("{:?} vs row {:?}", tx.shape(), tr.shape())));
        }
        let rv = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rv[i % c]))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, op, ng))
    }

    /// `x[.., c] + b[c]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, Op::AddRow(x, b), |v, r| v + r)
    }

    /// `x[.., c] * b[c]`
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, b, Op::MulRow(x, b), |v, r| v * r)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamp with zero gradient outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.cols() != k {
            return Err(shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let n = tb.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBT(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(c, r, out).unwrap(), Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("cols {} vs {}", t.cols(), c)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(shape_err("concat_cols", format!("rows {} vs {}", t.rows(), r)));
            }
            let c = t.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + width > c {
            return Err(shape_err("slice_cols", format!("{start}+{width} > {c}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(r, width, data)?, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let n = idx.len();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(n, c, data)?, Op::GatherRows(a, Rc::new(idx)), ng))
    }

    /// Repeats every row `k` times consecutively: `[r×c] -> [r·k×c]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                data.extend_from_slice(t.row(i));
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(r * k, c, data).unwrap(), Op::RepeatRows(a, k), ng)
    }

    /// Averages consecutive groups of `k` rows: `[r·k×c] -> [r×c]`.
    pub fn mean_row_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        let (rk, c) = (t.rows(), t.cols());
        if k == 0 || rk % k != 0 {
            return Err(shape_err("mean_row_groups", format!("{rk} rows, group {k}")));
        }
        let r = rk / k;
        let mut data = vec![0.0; r * c];
        for i in 0..rk {
            let g = i / k;
            for j in 0..c {
                data[g * c + j] += t.data()[i * c + j] / k as f64;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MeanRowGroups(a, k), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Sum along the last axis: `[r×c] -> [r×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, 1, data).unwrap(), Op::SumCols(a), ng)
    }

    /// Sum over rows: `[r×c] -> [1×c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(1, c, data).unwrap(), Op::SumRows(a), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", format!("{c} features, gamma {}", g.len())));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Softmax over the last axis. `blocked` (if any) is a `rows×cols` pattern
    /// repeated across leading axes; blocked entries come out exactly 0.
    pub fn softmax(&mut self, a: Var, blocked: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if let Some(m) = blocked {
            if m.is_empty() || m.len() % c != 0 || r % (m.len() / c) != 0 {
                return Err(shape_err("softmax", format!("mask {} for {r}x{c}", m.len())));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mrow = blocked.map(|m| {
                let mr = m.len() / c;
                &m[(i % mr) * c..(i % mr + 1) * c]
            });
            let allowed = |j: usize| mrow.map_or(true, |m| !m[j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if allowed(j) {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {i} fully blocked")));
            }
            let mut s = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let ng = self.ng(a);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(a);
        let out = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Per-head scaled dot products: `q[nq×c]`, `k[nk×c]` -> `[heads, nq, nk]`.
    pub fn head_logits(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let c = tq.cols();
        if tk.cols() != c || heads == 0 || c % heads != 0 {
            return Err(shape_err(
                "head_logits",
                format!("{:?} vs {:?} with {heads} heads", tq.shape(), tk.shape()),
            ));
        }
        let (nq, nk, dh) = (tq.rows(), tk.rows(), c / heads);
        let mut out = vec![0.0; heads * nq * nk];
        for h in 0..heads {
            let qh = head_block(tq.data(), nq, c, h, dh);
            let kh = head_block(tk.data(), nk, c, h, dh);
            let o = &mut out[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dh, nk, &qh, false, &kh, true, o);
            o.iter_mut().for_each(|v| *v *= scale);
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(
            Tensor::new(vec![heads, nq, nk], out)?,
            Op::HeadLogits { q, k, heads, scale },
            ng,
        ))
    }

    /// `logits[h, i, j] + bias[i, j]`.
    pub fn add_head_bias(&mut self, logits: Var, bias: Var) -> Result<Var> {
        let (tl, tb) = (self.value(logits), self.value(bias));
        let per = tb.len();
        if per == 0 || tl.len() % per != 0 || tb.cols() != tl.cols() {
            return Err(shape_err(
                "add_head_bias",
                format!("{:?} + {:?}", tl.shape(), tb.shape()),
            ));
        }
        let data = tl
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % per])
            .collect();
        let out = Tensor::new(tl.shape().to_vec(), data)?;
        let ng = self.ng(logits) || self.ng(bias);
        Ok(self.push(out, Op::AddHeadBias(logits, bias), ng))
    }

    /// Per-head weighted sum: `w[heads, nq, nk]`, `v[nk×c]` -> `[nq×c]`.
    pub fn head_mix(&mut self, w: Var, v: Var, heads: usize) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        let (nk, c) = (tv.rows(), tv.cols());
        if heads == 0 || c % heads != 0 || tw.cols() != nk || tw.len() % (heads * nk) != 0 {
            return Err(shape_err("head_mix", format!("{:?} · {:?}", tw.shape(), tv.shape())));
        }
        let nq = tw.len() / (heads * nk);
        let dh = c / heads;
        let mut out = vec![0.0; nq * c];
        for h in 0..heads {
            let vh = head_block(tv.data(), nk, c, h, dh);
            let wh = &tw.data()[h * nq * nk..(h + 1) * nq * nk];
            let mut oh = vec![0.0; nq * dh];
            gemm(nq, nk, dh, wh, false, &vh, false, &mut oh);
            for i in 0..nq {
                out[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Tensor::matrix(nq, c, out)?, Op::HeadMix { w, v, heads }, ng))
    }

    /// Windowed per-head logits: query `i` only scores keys `win.idx[i·width..]`.
    pub fn window_logits(
        &mut self,
        q: Var,
        k: Var,
        win: Rc<Window>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let (nq, c) = (tq.rows(), tq.cols());
        let w = win.width;
        if tk.cols() != c || heads == 0 || c % heads != 0 || win.idx.len() != nq * w {
            return Err(shape_err("window_logits", format!("{:?} vs {:?}", tq.shape(), tk.shape())));
        }
        if win.idx.iter().any(|&j| j >= tk.rows()) {
            return Err(shape_err("window_logits", "window index out of range"));
        }
        let dh = c / heads;
        let mut out = vec![0.0; heads * nq * w];
        for h in 0..heads {
            for i in 0..nq {
                let qi = &tq.data()[i * c + h * dh..i * c + (h + 1) * dh];
                for t in 0..w {
                    let j = win.idx[i * w + t];
                    let kj = &tk.data()[j * c + h * dh..j * c + (h + 1) * dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    out[(h * nq + i) * w + t] = dot * scale;
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(
            Tensor::new(vec![heads, nq, w], out)?,
            Op::WindowLogits {
                q,
                k,
                win,
                heads,
                scale,
            },
            ng,
        ))
    }

    pub fn window_mix(&mut self, w: Var, v: Var, win: Rc<Window>, heads: usize) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        let c = tv.cols();
        let width = win.width;
        let nq = win.idx.len() / width.max(1);
        if tw.len() != heads * nq * width || c % heads != 0 {
            return Err(shape_err("window_mix", format!("{:?} · {:?}", tw.shape(), tv.shape())));
        }
        let dh = c / heads;
        let mut out = vec![0.0; nq * c];
        for h in 0..heads {
            for i in 0..nq {
                for t in 0..width {
                    let a = tw.data()[(h * nq + i) * width + t];
                    if a == 0.0 {
                        continue;
                    }
                    let j = win.idx[i * width + t];
                    for d in 0..dh {
                        out[i * c + h * dh + d] += a * tv.data()[j * c + h * dh + d];
                    }
                }
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(
            Tensor::matrix(nq, c, out)?,
            Op::WindowMix { w, v, win, heads },
            ng,
        ))
    }

    /// `[heads, a, b] -> [a·b, heads]`: one row of head-wise weights per pair.
    pub fn heads_to_pairs(&mut self, w: Var) -> Result<Var> {
        let t = self.value(w);
        if t.shape().len() != 3 {
            return Err(shape_err("heads_to_pairs", format!("{:?}", t.shape())));
        }
        let (h, a, b) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; a * b * h];
        for hh in 0..h {
            for p in 0..a * b {
                out[p * h + hh] = t.data()[hh * a * b + p];
            }
        }
        let ng = self.ng(w);
        Ok(self.push(Tensor::matrix(a * b, h, out)?, Op::HeadsToPairs(w), ng))
    }

    /// `out[n, b, k] = Σ_d e[n, d] · f[b, d] · w[d, k]`.
    pub fn mask_logits(&mut self, e: Var, f: Var, w: Var) -> Result<Var> {
        let (te, tf, tw) = (self.value(e), self.value(f), self.value(w));
        let (n, d) = (te.rows(), te.cols());
        let nb = tf.rows();
        if tf.cols() != d || tw.shape().len() != 2 || tw.shape()[0] != d {
            return Err(shape_err(
                "mask_logits",
                format!("{:?}, {:?}, {:?}", te.shape(), tf.shape(), tw.shape()),
            ));
        }
        let k = tw.cols();
        let mut out = vec![0.0; n * nb * k];
        let mut ek = vec![0.0; n * d];
        let mut ok = vec![0.0; n * nb];
        for kk in 0..k {
            for i in 0..n {
                for dd in 0..d {
                    ek[i * d + dd] = te.data()[i * d + dd] * tw.data()[dd * k + kk];
                }
            }
            ok.iter_mut().for_each(|v| *v = 0.0);
            gemm(n, d, nb, &ek, false, tf.data(), true, &mut ok);
            for i in 0..n * nb {
                out[i * k + kk] = ok[i];
            }
        }
        let ng = self.ng(e) || self.ng(f) || self.ng(w);
        Ok(self.push(
            Tensor::new(vec![n, nb, k], out)?,
            Op::MaskLogits { e, f, w },
            ng,
        ))
    }

    /// Reverse pass from a scalar; gradients are added to the store's slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pidx) = node.op {
                let slot = &mut store.by_index_mut(pidx).grad;
                for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += v;
                }
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g / y).collect());
                }
                if self.ng(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.ng(*r) {
                    let c = self.value(*r).len();
                    let mut d = vec![0.0; c];
                    for (k, v) in gd.iter().enumerate() {
                        d[k % c] += v;
                    }
                    self.accumulate(grads, *r, d);
                }
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let c = vr.len();
                if self.ng(*x) {
                    let d = gd.iter().enumerate().map(|(k, g)| g * vr[k % c]).collect();
                    self.accumulate(grads, *x, d);
                }
                if self.ng(*r) {
                    let mut d = vec![0.0; c];
                    for (k, g) in gd.iter().enumerate() {
                        d[k % c] += g * vx[k];
                    }
                    self.accumulate(grads, *r, d);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut d);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut d);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MatMulBT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.ng(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), false, &mut d);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, ta.data(), false, &mut d);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Relu(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| g * sigmoid(-x)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| g * x.cos()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| -g * x.sin()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d.collect());
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Powf(a, p) => {
                let d = gd.iter().zip(val(*a)).map(|(g, x)| g * p * x.powf(p - 1.0)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Transpose(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let r = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                    }
                    self.accumulate(grads, p, d);
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RepeatRows(a, k) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (row, chunk) in gd.chunks(c).enumerate() {
                    let src = row / k;
                    for j in 0..c {
                        d[src * c + j] += chunk[j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanRowGroups(a, k) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for row in 0..t.rows() {
                    let gi = row / k;
                    for j in 0..c {
                        d[row * c + j] = gd[gi * c + j] / *k as f64;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n.max(1) as f64; n]);
            }
            Op::SumCols(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let d = (0..t.len()).map(|k| gd[k / c]).collect();
                self.accumulate(grads, *a, d);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let d = (0..t.len()).map(|k| gd[k % c]).collect();
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let r = inv_std.len();
                let gv = val(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for k in 0..r * c {
                        dg[k % c] += gd[k] * xhat[k];
                        db[k % c] += gd[k];
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gv[j];
                            dx[i * c + j] =
                                inv_std[i] / cf * (cf * dxh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[row * c + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::HeadLogits { q, k, heads, scale } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (nq, nk, c) = (tq.rows(), tk.rows(), tq.cols());
                let dh = c / heads;
                let mut dq = vec![0.0; nq * c];
                let mut dk = vec![0.0; nk * c];
                for h in 0..*heads {
                    let gh: Vec<f64> = gd[h * nq * nk..(h + 1) * nq * nk]
                        .iter()
                        .map(|v| v * scale)
                        .collect();
                    if self.ng(*q) {
                        let kh = head_block(tk.data(), nk, c, h, dh);
                        let mut dqh = vec![0.0; nq * dh];
                        gemm(nq, nk, dh, &gh, false, &kh, false, &mut dqh);
                        for i in 0..nq {
                            for d in 0..dh {
                                dq[i * c + h * dh + d] += dqh[i * dh + d];
                            }
                        }
                    }
                    if self.ng(*k) {
                        let qh = head_block(tq.data(), nq, c, h, dh);
                        let mut dkh = vec![0.0; nk * dh];
                        gemm(nk, nq, dh, &gh, true, &qh, false, &mut dkh);
                        for j in 0..nk {
                            for d in 0..dh {
                                dk[j * c + h * dh + d] += dkh[j * dh + d];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
            }
            Op::AddHeadBias(l, b) => {
                self.accumulate(grads, *l, gd.to_vec());
                if self.ng(*b) {
                    let per = self.value(*b).len();
                    let mut d = vec![0.0; per];
                    for (k, v) in gd.iter().enumerate() {
                        d[k % per] += v;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::HeadMix { w, v, heads } => {
                let (tw, tv) = (self.value(*w), self.value(*v));
                let (nk, c) = (tv.rows(), tv.cols());
                let dh = c / heads;
                let nq = tw.len() / (heads * nk);
                let mut dw = vec![0.0; tw.len()];
                let mut dv = vec![0.0; nk * c];
                for h in 0..*heads {
                    let gh = head_block(gd, nq, c, h, dh);
                    if self.ng(*w) {
                        let vh = head_block(tv.data(), nk, c, h, dh);
                        gemm(nq, dh, nk, &gh, false, &vh, true, &mut dw[h * nq * nk..(h + 1) * nq * nk]);
                    }
                    if self.ng(*v) {
                        let wh = &tw.data()[h * nq * nk..(h + 1) * nq * nk];
                        let mut dvh = vec![0.0; nk * dh];
                        gemm(nk, nq, dh, wh, true, &gh, false, &mut dvh);
                        for j in 0..nk {
                            for d in 0..dh {
                                dv[j * c + h * dh + d] += dvh[j * dh + d];
                            }
                        }
                    }
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *v, dv);
            }
            Op::WindowLogits {
                q,
                k,
                win,
                heads,
                scale,
            } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (nq, c) = (tq.rows(), tq.cols());
                let dh = c / heads;
                let w = win.width;
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                for h in 0..*heads {
                    for i in 0..nq {
                        for t in 0..w {
                            let gv = gd[(h * nq + i) * w + t] * scale;
                            if gv == 0.0 {
                                continue;
                            }
                            let j = win.idx[i * w + t];
                            for d in 0..dh {
                                let (qi, kj) = (i * c + h * dh + d, j * c + h * dh + d);
                                dq[qi] += gv * tk.data()[kj];
                                dk[kj] += gv * tq.data()[qi];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
            }
            Op::WindowMix { w, v, win, heads } => {
                let (tw, tv) = (self.value(*w), self.value(*v));
                let c = tv.cols();
                let dh = c / heads;
                let width = win.width;
                let nq = win.idx.len() / width.max(1);
                let mut dw = vec![0.0; tw.len()];
                let mut dv = vec![0.0; tv.len()];
                for h in 0..*heads {
                    for i in 0..nq {
                        for t in 0..width {
                            let j = win.idx[i * width + t];
                            let a = tw.data()[(h * nq + i) * width + t];
                            let mut acc = 0.0;
                            for d in 0..dh {
                                let go = gd[i * c + h * dh + d];
                                acc += go * tv.data()[j * c + h * dh + d];
                                dv[j * c + h * dh + d] += a * go;
                            }
                            dw[(h * nq + i) * width + t] = acc;
                        }
                    }
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *v, dv);
            }
            Op::HeadsToPairs(w) => {
                let t = self.value(*w);
                let (h, a, b) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut d = vec![0.0; t.len()];
                for hh in 0..h {
                    for p in 0..a * b {
                        d[hh * a * b + p] = gd[p * h + hh];
                    }
                }
                self.accumulate(grads, *w, d);
            }
            Op::MaskLogits { e, f, w } => {
                let (te, tf, tw) = (self.value(*e), self.value(*f), self.value(*w));
                let (n, d) = (te.rows(), te.cols());
                let nb = tf.rows();
                let k = tw.cols();
                let mut de = vec![0.0; n * d];
                let mut df = vec![0.0; nb * d];
                let mut dw = vec![0.0; d * k];
                let mut gk = vec![0.0; n * nb];
                let mut ek = vec![0.0; n * d];
                for kk in 0..k {
                    for p in 0..n * nb {
                        gk[p] = gd[p * k + kk];
                    }
                    // dE_k = g_k · f
                    let mut dek = vec![0.0; n * d];
                    gemm(n, nb, d, &gk, false, tf.data(), false, &mut dek);
                    for i in 0..n {
                        for dd in 0..d {
                            let x = dek[i * d + dd];
                            de[i * d + dd] += x * tw.data()[dd * k + kk];
                            dw[dd * k + kk] += x * te.data()[i * d + dd];
                        }
                    }
                    if self.ng(*f) {
                        for i in 0..n {
                            for dd in 0..d {
                                ek[i * d + dd] = te.data()[i * d + dd] * tw.data()[dd * k + kk];
                            }
                        }
                        gemm(nb, n, d, &gk, true, &ek, false, &mut df);
                    }
                }
                self.accumulate(grads, *e, de);
                self.accumulate(grads, *f, df);
                self.accumulate(grads, *w, dw);
            }
        }
        Ok(())
    }
}
