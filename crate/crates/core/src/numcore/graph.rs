//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node is pushed after its
//! operands, so the push order is already a topological order and
//! [`Graph::backward`] simply walks it in reverse, visiting each node once.
//! Nodes whose operands are all untracked are stored as constants and never
//! visited.

use super::kernels;
use super::tensor::{strides, Tensor};
use super::{Result, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Transpose {
        input: Var,
        dim0: usize,
        dim1: usize,
    },
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum {
        input: Var,
        axis: Option<usize>,
    },
    Mean {
        input: Var,
        axis: Option<usize>,
    },
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf. Its `requires_grad` flag decides whether it is tracked.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `tensor` in as a leaf, tracked when `trainable`.
    pub fn param(&mut self, tensor: &Tensor, trainable: bool) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("tensor invariant")
            .requires_grad(trainable);
        self.leaf(t)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].value.is_tracked()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.is_tracked(v));
        let value = Tensor::new(&shape, data)
            .expect("primitive produced inconsistent shape")
            .requires_grad(tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let ma = broadcast_map(&out_shape, sa);
        let mb = broadcast_map(&out_shape, sb);
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = out_shape.iter().product();
        let data = match (&ma, &mb) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = ma.as_ref().map_or(i, |m| m[i]);
                    let ib = mb.as_ref().map_or(i, |m| m[i]);
                    f(da[ia], db[ib])
                })
                .collect(),
        };
        Ok(self.push(out_shape, data, op, &[a, b]))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.add(a, s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- contractions ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of `[B, C_in, L]` with `[C_out, C_in, kernel]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 3 || si[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: si,
                rhs: sw,
            });
        }
        let geom = kernels::ConvGeom {
            batch: si[0],
            c_in: si[1],
            len_in: si[2],
            c_out: sw[0],
            kernel: sw[2],
            stride,
            padding,
        };
        let len_out = conv1d_output_len(geom.len_in, geom.kernel, stride, padding).ok_or_else(|| {
            TensorError::Invalid {
                op: "conv1d",
                msg: format!(
                    "kernel {} with stride {stride} and padding {padding} does not fit length {}",
                    geom.kernel, geom.len_in
                ),
            }
        })?;
        let mut out = vec![0.0; geom.batch * geom.c_out * len_out];
        kernels::conv1d_forward(&geom, len_out, self.data(input), self.data(weight), &mut out);
        Ok(self.push(
            vec![geom.batch, geom.c_out, len_out],
            out,
            Op::Conv1d {
                input,
                weight,
                stride,
                padding,
            },
            &[input, weight],
        ))
    }

    /// Adjoint of [`Graph::conv1d`]: `[B, C_in, L]` with `[C_in, C_out, kernel]`.
    /// Output length is `(L - 1) * stride - 2 * padding + kernel`.
    pub fn conv_transpose1d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 3 || si[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: si,
                rhs: sw,
            });
        }
        let geom = kernels::ConvGeom {
            batch: si[0],
            c_in: si[1],
            len_in: si[2],
            c_out: sw[1],
            kernel: sw[2],
            stride,
            padding,
        };
        let full = (geom.len_in.max(1) - 1) * stride + geom.kernel;
        if stride == 0 || geom.len_in == 0 || full <= 2 * padding {
            return Err(TensorError::Invalid {
                op: "conv_transpose1d",
                msg: format!("padding {padding} consumes the whole output"),
            });
        }
        let len_out = full - 2 * padding;
        let mut out = vec![0.0; geom.batch * geom.c_out * len_out];
        kernels::conv_transpose1d_forward(&geom, len_out, self.data(input), self.data(weight), &mut out);
        Ok(self.push(
            vec![geom.batch, geom.c_out, len_out],
            out,
            Op::ConvTranspose1d {
                input,
                weight,
                stride,
                padding,
            },
            &[input, weight],
        ))
    }

    // ---- shape -----------------------------------------------------------

    /// Swaps two axes.
    pub fn transpose(&mut self, input: Var, dim0: usize, dim1: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if dim0 >= shape.len() || dim1 >= shape.len() {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("axes ({dim0}, {dim1}) out of range for shape {shape:?}"),
            });
        }
        let (out_shape, map) = transpose_map(&shape, dim0, dim1);
        let src = self.data(input);
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(out_shape, data, Op::Transpose { input, dim0, dim1 }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).reshaped(shape)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Reshape(input), &[input]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} invalid for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let width = end - start;
        let src = self.data(input);
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.push(out_shape, data, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let w = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, input: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let src = self.data(input);
        let (out_shape, data) = match axis {
            None => {
                let s: f64 = src.iter().sum();
                let v = if mean { s / src.len() as f64 } else { s };
                (vec![], vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::Invalid {
                        op: if mean { "mean" } else { "sum" },
                        msg: format!("axis {ax} out of range for shape {shape:?}"),
                    });
                }
                let (outer, n, inner) = split_axis(&shape, ax);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
                if mean {
                    data.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (out_shape, data)
            }
        };
        let op = if mean { Op::Mean { input, axis } } else { Op::Sum { input, axis } };
        Ok(self.push(out_shape, data, op, &[input]))
    }

    /// Sum over one axis (removed from the shape), or over everything.
    pub fn sum(&mut self, input: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(input, axis, false)
    }

    pub fn mean(&mut self, input: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(input, axis, true)
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.data(input).iter().map(|&x| f(x)).collect();
        self.push(shape, data, op, &[input])
    }

    fn check_domain(&self, op: &'static str, input: Var) -> Result<()> {
        if let Some((index, &value)) = self
            .data(input)
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v < 0.0)
        {
            return Err(TensorError::Domain { op, index, value });
        }
        Ok(())
    }

    /// Square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        self.check_domain("sqrt", input)?;
        Ok(self.unary(input, f64::sqrt, Op::Sqrt(input)))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        Ok(self.unary(input, f64::exp, Op::Exp(input)))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        self.check_domain("log", input)?;
        Ok(self.unary(input, f64::ln, Op::Log(input)))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        Ok(self.unary(input, sigmoid, Op::Sigmoid(input)))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        Ok(self.unary(input, f64::tanh, Op::Tanh(input)))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        Ok(self.unary(input, |x| x.max(0.0), Op::Relu(input)))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::Invalid {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        Ok(self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(input);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { input, axis }, &[input]))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Previous gradients on the
    /// graph are discarded, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar { shape: loss_shape });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut finished: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            finished.push((i, g));
        }
        for (i, g) in finished {
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ma = broadcast_map(out_shape, self.shape(*a));
                let mb = broadcast_map(out_shape, self.shape(*b));
                self.accumulate(grads, *a, |ga| scatter(ga, g, ma.as_deref(), |x, _| x));
                self.accumulate(grads, *b, |gb| scatter(gb, g, mb.as_deref(), |x, _| sign * x));
            }
            Op::Mul(a, b) => {
                let ma = broadcast_map(out_shape, self.shape(*a));
                let mb = broadcast_map(out_shape, self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let at = |m: &Option<Vec<usize>>, i: usize| m.as_ref().map_or(i, |m| m[i]);
                self.accumulate(grads, *a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[at(&ma, k)] += gk * db[at(&mb, k)];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[at(&mb, k)] += gk * da[at(&ma, k)];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| kernels::gemm_nt(g, db, ga, m, n, k));
                self.accumulate(grads, *b, |gb| kernels::gemm_tn(da, g, gb, m, k, n));
            }
            Op::Conv1d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (si, sw) = (self.shape(*input), self.shape(*weight));
                let geom = kernels::ConvGeom {
                    batch: si[0],
                    c_in: si[1],
                    len_in: si[2],
                    c_out: sw[0],
                    kernel: sw[2],
                    stride: *stride,
                    padding: *padding,
                };
                let len_out = out_shape[2];
                let (x, w) = (self.data(*input), self.data(*weight));
                self.accumulate(grads, *input, |gx| kernels::conv1d_grad_input(&geom, len_out, w, g, gx));
                self.accumulate(grads, *weight, |gw| kernels::conv1d_grad_weight(&geom, len_out, x, g, gw));
            }
            Op::ConvTranspose1d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (si, sw) = (self.shape(*input), self.shape(*weight));
                let geom = kernels::ConvGeom {
                    batch: si[0],
                    c_in: si[1],
                    len_in: si[2],
                    c_out: sw[1],
                    kernel: sw[2],
                    stride: *stride,
                    padding: *padding,
                };
                let len_out = out_shape[2];
                let (x, w) = (self.data(*input), self.data(*weight));
                self.accumulate(grads, *input, |gx| {
                    kernels::conv_transpose1d_grad_input(&geom, len_out, w, g, gx)
                });
                self.accumulate(grads, *weight, |gw| {
                    kernels::conv_transpose1d_grad_weight(&geom, len_out, x, g, gw)
                });
            }
            Op::Transpose { input, dim0, dim1 } => {
                let (_, map) = transpose_map(self.shape(*input), *dim0, *dim1);
                self.accumulate(grads, *input, |gi| scatter(gi, g, Some(&map), |x, _| x));
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, |gi| scatter(gi, g, None, |x, _| x));
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let (outer, n, inner) = split_axis(shape, *axis);
                let width = out_shape[*axis];
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        for (d, &s) in gi[base..base + width * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let w = self.shape(v)[*axis];
                    self.accumulate(grads, v, |gi| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            for (d, &s) in gi[o * w * inner..(o + 1) * w * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*input);
                match axis {
                    None => {
                        let n = shape.iter().product::<usize>() as f64;
                        let v = if is_mean { g[0] / n } else { g[0] };
                        self.accumulate(grads, *input, |gi| gi.iter_mut().for_each(|d| *d += v));
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(shape, *ax);
                        let scale = if is_mean { 1.0 / n as f64 } else { 1.0 };
                        self.accumulate(grads, *input, |gi| {
                            for o in 0..outer {
                                let src = &g[o * inner..(o + 1) * inner];
                                for j in 0..n {
                                    let row = &mut gi[(o * n + j) * inner..(o * n + j + 1) * inner];
                                    for (d, &s) in row.iter_mut().zip(src) {
                                        *d += s * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Sqrt(input) => {
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &y) in gi.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *d += gk * 0.5 / y;
                        }
                    }
                });
            }
            Op::Exp(input) => {
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &y) in gi.iter_mut().zip(g).zip(out) {
                        *d += gk * y;
                    }
                });
            }
            Op::Log(input) => {
                let x = self.data(*input);
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &xv) in gi.iter_mut().zip(g).zip(x) {
                        *d += gk / xv;
                    }
                });
            }
            Op::Sigmoid(input) => {
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &y) in gi.iter_mut().zip(g).zip(out) {
                        *d += gk * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(input) => {
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &y) in gi.iter_mut().zip(g).zip(out) {
                        *d += gk * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(input) => {
                let x = self.data(*input);
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &xv) in gi.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gk;
                        }
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.data(*input);
                self.accumulate(grads, *input, |gi| {
                    for ((d, &gk), &xv) in gi.iter_mut().zip(g).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *d += gk;
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                gi[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.is_tracked(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

/// `floor((len + 2 * padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv1d_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * padding < kernel {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scatter(dst: &mut [f64], g: &[f64], map: Option<&[usize]>, f: impl Fn(f64, usize) -> f64) {
    match map {
        None => {
            for (k, (d, &gk)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(gk, k);
            }
        }
        Some(m) => {
            for (k, &gk) in g.iter().enumerate() {
                dst[m[k]] += f(gk, k);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat input index for every flat output index, or `None` when no
/// broadcasting is involved.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let n = out.len();
    let in_strides = strides(inp);
    let mut eff = vec![0; n];
    for i in 0..inp.len() {
        let j = i + n - inp.len();
        eff[j] = if inp[i] == 1 { 0 } else { in_strides[i] };
    }
    Some(walk_offsets(out, &eff))
}

fn transpose_map(shape: &[usize], dim0: usize, dim1: usize) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let mut out_shape = shape.to_vec();
    out_shape.swap(dim0, dim1);
    let mut eff = in_strides;
    eff.swap(dim0, dim1);
    let map = walk_offsets(&out_shape, &eff);
    (out_shape, map)
}

/// Offsets `sum(index[d] * strides[d])` for every multi-index of `shape`
/// in row-major order.
fn walk_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let n = shape.len();
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..n).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}
