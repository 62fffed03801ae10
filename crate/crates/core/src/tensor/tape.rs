//! Define-by-run reverse-mode differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and enough bookkeeping to compute vector-Jacobian products.
//! [`Tape::backward`] walks the nodes in exact reverse execution order and
//! sums adjoints for values consumed more than once. Nodes that depend only on
//! constants or frozen parameters are skipped during the backward walk.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Integer index tensor (top-k selections, gather indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indices {
    pub shape: Vec<usize>,
    pub data: Vec<usize>,
}

impl Indices {
    /// Row `r` of a `[.., k]` index tensor.
    pub fn row(&self, r: usize) -> &[usize] {
        let k = *self.shape.last().unwrap_or(&1);
        &self.data[r * k..(r + 1) * k]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.shape.last().copied().unwrap_or(1).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Square,
    Gelu,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    /// Right operand may broadcast over leading axes of the left.
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Conv {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        transposed: bool,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorder for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Returns the repeat count of `rhs` over `lhs` under the trailing-axis rule.
fn broadcast_repeats(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if lhs == rhs {
        return Ok(1);
    }
    let lead = rhs.iter().take_while(|&&d| d == 1).count();
    let core = &rhs[lead..];
    let ok =
        rhs.len() <= lhs.len().max(1) && core.len() <= lhs.len() && &lhs[lhs.len() - core.len()..] == core;
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let lhs_n: usize = lhs.iter().product();
    let rhs_n: usize = core.iter().product();
    Ok(lhs_n / rhs_n.max(1))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Record an input. Inputs with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter. Repeated binds of the same id return the same var so
    /// adjoints accumulate on a single node. Frozen parameters are constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        Ok(self.param(store, id))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let reps = broadcast_repeats(name, av.shape(), bv.shape())?;
        let bn = bv.numel();
        if op == BinaryOp::Div && bv.data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        debug_assert_eq!(av.numel(), reps * bn);
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        check_finite(name, &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (name, out) = match op {
            UnaryOp::Neg => ("neg", av.map(|x| -x)),
            UnaryOp::Exp => ("exp", av.map(|x| x.exp())),
            UnaryOp::Log => {
                if av.data().iter().any(|&x| x <= T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "non-positive argument".into(),
                    });
                }
                ("log", av.map(|x| x.ln()))
            }
            UnaryOp::Square => ("square", av.map(|x| x * x)),
            UnaryOp::Gelu => ("gelu", av.map(kernels::gelu)),
        };
        check_finite(name, &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(op, a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        check_finite("add_scalar", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddScalar(a), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        check_finite("mul_scalar", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// `a[.., m, k] · b[k, n] -> [.., m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 1 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut data = vec![T::zero(); m * n];
        kernels::gemm_nn(av.data(), bv.data(), &mut data, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::from_parts(shape, data);
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::from_parts(vec![bs, m, n], data);
        check_finite("bmm", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::BatchMatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.rank()];
        let valid = axes.len() == av.rank()
            && axes
                .iter()
                .all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("axes {axes:?} for shape {:?}", av.shape()),
            });
        }
        let data = kernels::permute(av.data(), av.shape(), axes);
        let shape = axes.iter().map(|&i| av.shape()[i]).collect();
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.last_dim();
        if c == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                detail: "empty last axis".into(),
            });
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        check_finite("softmax", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Per-token normalization over the last axis (variance + 1e-5), then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 || self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.numel() / c;
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-token channel selection: `out[.., j] = x[.., idx[.., j]]`.
    pub fn gather(&mut self, x: Var, idx: &Indices) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let k = idx.shape.last().copied().unwrap_or(0);
        let rows = xv.numel() / c.max(1);
        if idx.data.len() != rows * k || idx.shape[..idx.shape.len() - 1] != xv.shape()[..xv.rank() - 1] {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: xv.shape().to_vec(),
                rhs: idx.shape.clone(),
            });
        }
        if let Some(&bad) = idx.data.iter().find(|&&i| i >= c) {
            return Err(Error::IndexOutOfBounds { index: bad, len: c });
        }
        let data: Vec<T> = (0..rows)
            .flat_map(|r| idx.data[r * k..(r + 1) * k].iter().map(move |&i| r * c + i))
            .map(|flat| xv.data()[flat])
            .collect();
        let out = Tensor::from_parts(idx.shape.clone(), data);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: idx.data.clone(),
            },
            rg,
        ))
    }

    /// Top-`k` per token over the last axis. Indices carry no gradient; the
    /// values route adjoints back to the selected positions only.
    pub fn topk(&mut self, x: Var, k: usize) -> Result<(Indices, Var)> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if k == 0 || k > c {
            return Err(Error::TopKRange { k, channels: c });
        }
        let data = kernels::topk_rows(xv.data(), c, k);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = k;
        let idx = Indices { shape, data };
        let values = self.gather(x, &idx)?;
        Ok((idx, values))
    }

    fn conv_geom(
        op: &'static str,
        x: &[usize],
        kernel: &[usize],
        stride: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        if x.len() != 3 || kernel.len() != 4 || kernel[2] != x[2] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (kh, kw) = (kernel[0], kernel[1]);
        let (h, w, ho, wo) = if transposed {
            (x[0] * stride, x[1] * stride, x[0], x[1])
        } else {
            if !x[0].is_multiple_of(stride) || !x[1].is_multiple_of(stride) {
                return Err(Error::InvalidShape {
                    op,
                    detail: format!("spatial {}x{} not divisible by stride {stride}", x[0], x[1]),
                });
            }
            (x[0], x[1], x[0] / stride, x[1] / stride)
        };
        Ok(ConvGeom {
            h,
            w,
            ho,
            wo,
            kh,
            kw,
            stride,
            pad: kh / 2,
        })
    }

    /// Zero-padded strided cross-correlation:
    /// `x[H, W, Cin] * kernel[kh, kw, Cin, Cout] -> [H/s, W/s, Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let geom = Self::conv_geom("conv2d", xv.shape(), kv.shape(), stride, false)?;
        let (cin, cout) = (kv.shape()[2], kv.shape()[3]);
        let mut data = vec![T::zero(); geom.ho * geom.wo * cout];
        let (xd, kd) = (xv.data(), kv.data());
        geom.for_each(|coarse, tap, fine| {
            kernels::vecmat_acc(
                &xd[fine * cin..(fine + 1) * cin],
                &kd[tap * cin * cout..(tap + 1) * cin * cout],
                &mut data[coarse * cout..(coarse + 1) * cout],
            );
        });
        let out = Tensor::from_parts(vec![geom.ho, geom.wo, cout], data);
        check_finite("conv2d", &out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                kernel,
                geom,
                transposed: false,
            },
            rg,
        ))
    }

    /// Adjoint of [`Tape::conv2d`] with the same geometry:
    /// `x[h, w, Cin] -> [h*s, w*s, Cout]` with `kernel[kh, kw, Cin, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let geom = Self::conv_geom("conv_transpose2d", xv.shape(), kv.shape(), stride, true)?;
        let (cin, cout) = (kv.shape()[2], kv.shape()[3]);
        let mut data = vec![T::zero(); geom.h * geom.w * cout];
        let (xd, kd) = (xv.data(), kv.data());
        geom.for_each(|coarse, tap, fine| {
            kernels::vecmat_acc(
                &xd[coarse * cin..(coarse + 1) * cin],
                &kd[tap * cin * cout..(tap + 1) * cin * cout],
                &mut data[fine * cout..(fine + 1) * cout],
            );
        });
        let out = Tensor::from_parts(vec![geom.h, geom.w, cout], data);
        check_finite("conv_transpose2d", &out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                kernel,
                geom,
                transposed: true,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        check_finite("sum", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = T::of(av.numel().max(1) as f64);
        let out = Tensor::scalar(av.sum() / n);
        check_finite("mean", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("output must be scalar, got {:?}", out.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.shape().to_vec()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.rg(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => {
                for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                let gd = g.data();
                if self.rg(*a) {
                    let ga: Vec<T> = match op {
                        BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                        BinaryOp::Mul => gd
                            .iter()
                            .enumerate()
                            .map(|(i, &d)| d * bv.data()[i % bn])
                            .collect(),
                        BinaryOp::Div => gd
                            .iter()
                            .enumerate()
                            .map(|(i, &d)| d / bv.data()[i % bn])
                            .collect(),
                    };
                    self.send(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bn];
                    for (i, &d) in gd.iter().enumerate() {
                        let j = i % bn;
                        let contrib = match op {
                            BinaryOp::Add => d,
                            BinaryOp::Sub => -d,
                            BinaryOp::Mul => d * av.data()[i],
                            BinaryOp::Div => -d * y.data()[i] / bv.data()[j],
                        };
                        gb[j] = gb[j] + contrib;
                    }
                    self.send(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Unary(op, a) => {
                let av = self.value(*a);
                let ga: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let x = av.data()[i];
                        match op {
                            UnaryOp::Neg => -d,
                            UnaryOp::Exp => d * y.data()[i],
                            UnaryOp::Log => d / x,
                            UnaryOp::Square => d * (x + x),
                            UnaryOp::Gelu => d * kernels::gelu_grad(x),
                        }
                    })
                    .collect();
                self.send(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.send(grads, *a, g.map(|d| d * *s)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let n = bv.shape()[1];
                let m = av.numel() / k.max(1);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    self.send(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                    self.send(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        kernels::gemm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.send(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        kernels::gemm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.send(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let data = kernels::permute(g.data(), g.shape(), &inverse);
                let shape = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::from_parts(shape, data));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (full, len) = (xs[*axis], g.shape()[*axis]);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.send(grads, *x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.rg(p) {
                        self.send(grads, p, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Softmax(a) => {
                let c = y.last_dim();
                let mut ga = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&p, &d)| p * (d - dot)));
                }
                self.send(grads, *a, Tensor::from_parts(y.shape().to_vec(), ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut gx = Vec::with_capacity(y.numel());
                    for (r, (hr, gr)) in xhat.chunks(c).zip(g.data().chunks(c)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_c;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| rstd[r] * (d - mean_dh - h * mean_dhh)),
                        );
                    }
                    self.send(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
                }
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for (hr, gr) in xhat.chunks(c).zip(g.data().chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                    self.send(grads, *gain, Tensor::from_parts(vec![c], gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                    self.send(grads, *bias, Tensor::from_parts(vec![c], gb));
                }
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let k = g.last_dim();
                let mut gx = vec![T::zero(); xv.numel()];
                for (j, &d) in g.data().iter().enumerate() {
                    let flat = (j / k) * c + idx[j];
                    gx[flat] = gx[flat] + d;
                }
                self.send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Conv {
                x,
                kernel,
                geom,
                transposed,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (cin, cout) = (kv.shape()[2], kv.shape()[3]);
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                let blk = cin * cout;
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); xv.numel()];
                    geom.for_each(|coarse, tap, fine| {
                        let kb = &kd[tap * blk..(tap + 1) * blk];
                        if *transposed {
                            kernels::matvec_acc(
                                kb,
                                &gd[fine * cout..(fine + 1) * cout],
                                &mut gx[coarse * cin..(coarse + 1) * cin],
                            );
                        } else {
                            kernels::matvec_acc(
                                kb,
                                &gd[coarse * cout..(coarse + 1) * cout],
                                &mut gx[fine * cin..(fine + 1) * cin],
                            );
                        }
                    });
                    self.send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.rg(*kernel) {
                    let mut gk = vec![T::zero(); kv.numel()];
                    geom.for_each(|coarse, tap, fine| {
                        let (src, dst) = if *transposed {
                            (coarse, fine)
                        } else {
                            (fine, coarse)
                        };
                        kernels::outer_acc(
                            &xd[src * cin..(src + 1) * cin],
                            &gd[dst * cout..(dst + 1) * cout],
                            &mut gk[tap * blk..(tap + 1) * blk],
                        );
                    });
                    self.send(grads, *kernel, Tensor::from_parts(kv.shape().to_vec(), gk));
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.send(grads, *a, Tensor::full(av.shape().to_vec(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let n = T::of(av.numel().max(1) as f64);
                self.send(grads, *a, Tensor::full(av.shape().to_vec(), g.item() / n));
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound, trainable parameter, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|&(id, _)| id);
        out
    }

    /// Add `scale * grad` for every trainable parameter into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate(id, g, scale)?;
        }
        Ok(())
    }
}
