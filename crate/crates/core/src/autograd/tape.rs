use std::fmt;

use super::kernels::{self, SeqDims, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.0)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// Second operand is a vector added along the last axis.
    AddBias(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<Var>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        win: Window,
    },
    AvgPool1d {
        x: Var,
        win: Window,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Values are appended in execution order; [`Tape::backward`] walks them in reverse.
/// Gradients accumulate across backward calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if `v` requires grad and a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            });
        }
        Ok(())
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a` (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let out: Vec<f64> = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.push_op(Tensor::from_parts(sa, out), &[a, b], Op::Add(a, b)));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let n = sb[0];
            let bias = self.data(b);
            let out: Vec<f64> = self
                .data(a)
                .chunks(n)
                .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                .collect();
            return Ok(self.push_op(Tensor::from_parts(sa, out), &[a, b], Op::AddBias(a, b)));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            left: sa,
            right: sb,
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), &[a, b], Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Tensor::from_parts(shape, out), &[a], Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Tensor::from_parts(shape, out), &[a], Op::AddScalar(a))
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_rows(self.data(a), self.data(b), m, k, n);
        Ok(self.push_op(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMul(a, b),
        ))
    }

    /// `x W + b` over the last axis of `x`; `W` is `(k, n)`, `b` is `(n)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: sx,
                right: sw,
            });
        }
        if sb != [sw[1]] {
            return Err(Error::ShapeMismatch {
                op: "affine(bias)",
                left: sw,
                right: sb,
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).len() / k;
        let mut out = matmul_rows(self.data(x), self.data(w), m, k, n);
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x, w, b],
            Op::Affine { x, w, b },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v < 0.0 { 0.0 } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(Tensor::from_parts(shape, out), &[x], Op::Relu(x))
    }

    /// Natural log; non-positive inputs yield `-inf`/NaN as usual.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(Tensor::from_parts(shape, out), &[x], Op::Log(x))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v < floor { floor } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(Tensor::from_parts(shape, out), &[x], Op::ClampMin(x, floor))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x],
            Op::Softmax { x, axis },
        ))
    }

    fn reduce(
        &mut self,
        op: &'static str,
        x: Var,
        axis: usize,
        scale_by_extent: bool,
    ) -> Result<Var> {
        self.check_axis(op, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if scale_by_extent {
            let s = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let node = if scale_by_extent {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push_op(Tensor::from_parts(out_shape, out), &[x], node))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push_op(Tensor::scalar(total), &[x], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scalar_mul(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(
            Tensor::from_parts(shape.to_vec(), data),
            &[x],
            Op::Reshape(x),
        ))
    }

    /// Selects rows of a `(rows, cols)` table, in the order given by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("table must be 2-axis, got {shape:?}"),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: "no rows selected".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("row {bad} out of range for table {shape:?}"),
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..][..cols]);
        }
        let value = Tensor::from_parts(vec![ids.len(), cols], out);
        Ok(self.push_op(
            value,
            &[table],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `sum_i weights[i] * terms[i]` for a weight vector and equally shaped terms.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[Var]) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        if ws != [terms.len()] {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: ws,
                right: vec![terms.len()],
            });
        }
        let Some(&first) = terms.first() else {
            return Err(Error::InvalidShape {
                op: "weighted_sum",
                msg: "no terms".into(),
            });
        };
        for &t in &terms[1..] {
            self.same_shape("weighted_sum", first, t)?;
        }
        let mut out = vec![0.0; self.value(first).len()];
        for (&t, &w) in terms.iter().zip(self.data(weights)) {
            for (o, v) in out.iter_mut().zip(self.data(t)) {
                *o += w * v;
            }
        }
        let shape = self.shape(first).to_vec();
        let mut inputs = vec![weights];
        inputs.extend_from_slice(terms);
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &inputs,
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
        ))
    }

    fn seq_dims(&self, op: &'static str, x: Var) -> Result<SeqDims> {
        match *self.shape(x) {
            [batch, length, channels] => Ok(SeqDims {
                batch,
                length,
                channels,
            }),
            ref s => Err(Error::InvalidShape {
                op,
                msg: format!("expected (batch, length, dim), got {s:?}"),
            }),
        }
    }

    fn out_len(op: &'static str, dims: SeqDims, win: Window) -> Result<usize> {
        match win.output_length(dims.length) {
            Some(l) if l > 0 => Ok(l),
            _ => Err(Error::InvalidShape {
                op,
                msg: format!("window {win:?} does not fit length {}", dims.length),
            }),
        }
    }

    /// Stride-1 dilated convolution over `(batch, length, dim_in)` with a
    /// `(filter_size, dim_in, dim_out)` kernel and `(dim_out)` bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let dims = self.seq_dims("conv1d", x)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != dims.channels || ks[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: self.shape(x).to_vec(),
                right: ks,
            });
        }
        if self.shape(bias) != [ks[2]] {
            return Err(Error::ShapeMismatch {
                op: "conv1d(bias)",
                left: ks,
                right: self.shape(bias).to_vec(),
            });
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d: dilation must be at least 1"));
        }
        let win = Window {
            size: ks[0],
            padding,
            dilation,
        };
        let out_len = Self::out_len("conv1d", dims, win)?;
        let out = kernels::conv1d_forward(
            self.data(x),
            dims,
            self.data(kernel),
            self.data(bias),
            ks[2],
            win,
            out_len,
        );
        let value = Tensor::from_parts(vec![dims.batch, out_len, ks[2]], out);
        Ok(self.push_op(
            value,
            &[x, kernel, bias],
            Op::Conv1d {
                x,
                kernel,
                bias,
                win,
            },
        ))
    }

    /// Stride-1 average pooling; padded taps count as zeros in the window mean.
    pub fn avg_pool1d(&mut self, x: Var, filter_size: usize, padding: usize) -> Result<Var> {
        let dims = self.seq_dims("avg_pool1d", x)?;
        let win = Window {
            size: filter_size,
            padding,
            dilation: 1,
        };
        if filter_size == 0 {
            return Err(Error::invalid("avg_pool1d: filter size must be positive"));
        }
        let out_len = Self::out_len("avg_pool1d", dims, win)?;
        let out = kernels::avg_pool1d_forward(self.data(x), dims, win, out_len);
        let value = Tensor::from_parts(vec![dims.batch, out_len, dims.channels], out);
        Ok(self.push_op(value, &[x], Op::AvgPool1d { x, win }))
    }

    /// Stride-1 max pooling; padded taps compete as zeros and ties go to the lowest tap.
    pub fn max_pool1d(&mut self, x: Var, filter_size: usize, padding: usize) -> Result<Var> {
        let dims = self.seq_dims("max_pool1d", x)?;
        let win = Window {
            size: filter_size,
            padding,
            dilation: 1,
        };
        if filter_size == 0 {
            return Err(Error::invalid("max_pool1d: filter size must be positive"));
        }
        let out_len = Self::out_len("max_pool1d", dims, win)?;
        let (out, argmax) = kernels::max_pool1d_forward(self.data(x), dims, win, out_len);
        let value = Tensor::from_parts(vec![dims.batch, out_len, dims.channels], out);
        Ok(self.push_op(value, &[x], Op::MaxPool1d { x, argmax }))
    }

    /// Backpropagates from a scalar `root`, adding into the gradient of every
    /// requires-grad value that contributes to it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        let data = |v: Var| nodes[v.0].value.data();
        let out = nodes[idx].value.data();

        // Runs `f` on the gradient buffer of `v` when it requires grad.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if wants(v) {
                f(accumulate(&mut grads[v.0], len_of(v)));
            }
        };
        let add_into = |buf: &mut [f64], src: &[f64], scale: f64| {
            buf.iter_mut().zip(src).for_each(|(a, v)| *a += scale * v);
        };
        let seq_dims = |v: Var| {
            let s = nodes[v.0].value.shape();
            SeqDims {
                batch: s[0],
                length: s[1],
                channels: s[2],
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, &mut |buf| add_into(buf, g, 1.0));
                acc(b, &mut |buf| add_into(buf, g, 1.0));
            }
            &Op::AddBias(a, b) => {
                acc(a, &mut |buf| add_into(buf, g, 1.0));
                let n = len_of(b);
                acc(b, &mut |buf| {
                    g.chunks(n).for_each(|row| add_into(buf, row, 1.0))
                });
            }
            &Op::Mul(a, b) => {
                let (da, db) = (data(a), data(b));
                acc(a, &mut |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(db))
                        .for_each(|(x, (gv, bv))| *x += gv * bv)
                });
                acc(b, &mut |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(da))
                        .for_each(|(x, (gv, av))| *x += gv * av)
                });
            }
            &Op::ScalarMul(a, c) => acc(a, &mut |buf| add_into(buf, g, c)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |buf| add_into(buf, g, 1.0)),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(a, &mut |buf| grad_lhs(g, data(b), m, k, n, buf));
                acc(b, &mut |buf| grad_rhs(data(a), g, m, k, n, buf));
            }
            &Op::Affine { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let m = len_of(x) / k;
                acc(x, &mut |buf| grad_lhs(g, data(w), m, k, n, buf));
                acc(w, &mut |buf| grad_rhs(data(x), g, m, k, n, buf));
                acc(b, &mut |buf| {
                    g.chunks(n).for_each(|row| add_into(buf, row, 1.0))
                });
            }
            &Op::Relu(x) => {
                let dx = data(x);
                acc(x, &mut |buf| {
                    for (a, (gv, xv)) in buf.iter_mut().zip(g.iter().zip(dx)) {
                        if *xv > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            &Op::Log(x) => {
                let dx = data(x);
                acc(x, &mut |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(dx))
                        .for_each(|(a, (gv, xv))| *a += gv / xv)
                });
            }
            &Op::ClampMin(x, floor) => {
                let dx = data(x);
                acc(x, &mut |buf| {
                    for (a, (gv, xv)) in buf.iter_mut().zip(g.iter().zip(dx)) {
                        if *xv > floor {
                            *a += gv;
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(nodes[idx].value.shape(), axis);
                acc(x, &mut |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let dotp: f64 = (0..n).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..n {
                                buf[at(i)] += out[at(i)] * (g[at(i)] - dotp);
                            }
                        }
                    }
                });
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), axis);
                let scale = match nodes[idx].op {
                    Op::Mean { .. } => 1.0 / n as f64,
                    _ => 1.0,
                };
                acc(x, &mut |buf| {
                    for o in 0..outer {
                        let src = &g[o * inner..][..inner];
                        for i in 0..n {
                            add_into(&mut buf[(o * n + i) * inner..][..inner], src, scale);
                        }
                    }
                });
            }
            &Op::SumAll(x) => acc(x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0])),
            Op::GatherRows { table, ids } => {
                let cols = nodes[table.0].value.shape()[1];
                acc(*table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * cols..][..cols], &g[r * cols..][..cols], 1.0);
                    }
                });
            }
            Op::WeightedSum { weights, terms } => {
                let w = data(*weights);
                acc(*weights, &mut |buf| {
                    for (slot, &t) in buf.iter_mut().zip(terms) {
                        *slot += data(t).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                for (&t, &wi) in terms.iter().zip(w) {
                    acc(t, &mut |buf| add_into(buf, g, wi));
                }
            }
            &Op::Conv1d {
                x,
                kernel,
                bias,
                win,
            } => {
                let dims = seq_dims(x);
                let out_shape = nodes[idx].value.shape();
                let (cout, out_len) = (out_shape[2], out_shape[1]);
                let (dx, dk) = (data(x), data(kernel));
                acc(x, &mut |buf| {
                    kernels::conv1d_backward(g, dx, dims, dk, cout, win, out_len, Some(buf), None)
                });
                acc(kernel, &mut |buf| {
                    kernels::conv1d_backward(g, dx, dims, dk, cout, win, out_len, None, Some(buf))
                });
                acc(bias, &mut |buf| {
                    g.chunks(cout).for_each(|row| add_into(buf, row, 1.0))
                });
            }
            &Op::AvgPool1d { x, win } => {
                let dims = seq_dims(x);
                let out_len = nodes[idx].value.shape()[1];
                acc(x, &mut |buf| {
                    kernels::avg_pool1d_backward(g, dims, win, out_len, buf)
                });
            }
            Op::MaxPool1d { x, argmax } => {
                acc(*x, &mut |buf| kernels::max_pool1d_backward(g, argmax, buf));
            }
        }
    }
}

fn matmul_rows(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            row.iter_mut()
                .zip(&b[p * n..][..n])
                .for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// dA += G B^T
fn grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..][..n];
        for p in 0..k {
            ga[i * k + p] += gi
                .iter()
                .zip(&b[p * n..][..n])
                .map(|(x, y)| x * y)
                .sum::<f64>();
        }
    }
}

/// dB += A^T G
fn grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            gb[p * n..][..n]
                .iter_mut()
                .zip(gi)
                .for_each(|(o, gv)| *o += av * gv);
        }
    }
}
