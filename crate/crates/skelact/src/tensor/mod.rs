//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape of nodes created in topological order; `Tensor` is a
//! handle into it. Values are double precision throughout. Parameters live
//! outside any graph and are bound into a tape per forward pass; `backward`
//! computes node gradients which can then be flushed or collected back into
//! the parameters.

mod spatial;

pub mod gradcheck;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} expects {1}-d input, got shape {2:?}")]
    BadRank(&'static str, usize, Vec<usize>),
    #[error("pool window {window} exceeds spatial size {h}x{w}")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("resize target {0}x{1} must be nonzero")]
    ZeroSizeTarget(usize, usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("axis {0} out of range for shape {1:?}")]
    BadAxis(usize, Vec<usize>),
    #[error("label {0} out of range for {1} classes")]
    BadLabel(usize, usize),
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RedOp {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
    },
    Unary {
        x: usize,
        f: Pointwise,
    },
    Softmax {
        x: usize,
        axes: Vec<usize>,
    },
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Binary {
        a: usize,
        b: usize,
        f: BinOp,
    },
    Reduce {
        x: usize,
        f: RedOp,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

struct GraphInner {
    nodes: Vec<Node>,
    bindings: Vec<(usize, Parameter)>,
}

/// A tape of operations; cloning the handle shares the tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

/// Named trainable (or bookkeeping) value shared between graphs and the
/// optimizer. Cloning shares the storage.
#[derive(Clone)]
pub struct Parameter {
    inner: Arc<Mutex<ParamData>>,
}

pub struct ParamData {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; values.len()];
        Self {
            inner: Arc::new(Mutex::new(ParamData {
                name: name.into(),
                shape,
                values,
                grad,
                trainable: true,
            })),
        }
    }

    pub fn frozen(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let p = Self::new(name, shape, values);
        p.lock().trainable = false;
        p
    }

    pub fn lock(&self) -> MutexGuard<'_, ParamData> {
        self.inner.lock().expect("parameter lock poisoned")
    }

    pub fn name(&self) -> String {
        self.lock().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.lock().shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.lock().values.clone()
    }

    pub fn set_values(&self, values: Vec<f64>) {
        let mut data = self.lock();
        assert_eq!(values.len(), data.values.len());
        data.values = values;
    }

    pub fn grad(&self) -> Vec<f64> {
        self.lock().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.lock().grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_grad(&self, grad: &[f64]) {
        let mut data = self.lock();
        for (g, d) in data.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.lock().trainable
    }

    pub fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }
}

fn multi_index(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        out[d] = flat % shape[d];
        flat /= shape[d];
    }
}

/// Maps an output multi-index onto a (possibly broadcast) source shape,
/// aligning axes from the right.
fn bcast_src_index(out_multi: &[usize], src_shape: &[usize]) -> usize {
    let offset = out_multi.len() - src_shape.len();
    let mut idx = 0;
    for (d, &extent) in src_shape.iter().enumerate() {
        let coord = if extent == 1 { 0 } else { out_multi[offset + d] };
        idx = idx * extent + coord;
    }
    idx
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[d] = da.max(db);
    }
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                bindings: Vec::new(),
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; values.len()];
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            values,
            grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A constant leaf; gradients flow to it but go nowhere further.
    pub fn tensor(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        self.push(shape, values, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.tensor(vec![1], vec![value])
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        self.tensor(shape, vec![0.0; len])
    }

    /// Binds a parameter as a leaf of this tape; `flush_param_grads` (or
    /// `collect_param_grads`) routes gradients back after `backward`.
    pub fn bind(&self, param: &Parameter) -> Tensor {
        let (shape, values) = {
            let data = param.lock();
            (data.shape.clone(), data.values.clone())
        };
        let t = self.push(shape, values, Op::Leaf);
        self.inner.borrow_mut().bindings.push((t.id, param.clone()));
        t
    }

    /// Adds each bound node's gradient into its parameter.
    pub fn flush_param_grads(&self) {
        let inner = self.inner.borrow();
        for (id, param) in &inner.bindings {
            param.add_grad(&inner.nodes[*id].grad);
        }
    }

    /// Per-parameter gradients of this tape, in binding order.
    pub fn collect_param_grads(&self) -> Vec<(Parameter, Vec<f64>)> {
        let inner = self.inner.borrow();
        inner
            .bindings
            .iter()
            .map(|(id, param)| (param.clone(), inner.nodes[*id].grad.clone()))
            .collect()
    }
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    /// Zero-padded cross-correlation: x [N,H,W,Cin] with k [kh,kw,Cin,Cout].
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.same_graph(kernel);
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 {
            return Err(TensorError::BadRank("conv2d", 4, xs));
        }
        if ks.len() != 4 {
            return Err(TensorError::BadRank("conv2d kernel", 4, ks));
        }
        if xs[3] != ks[2] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: input channels {} != kernel channels {}",
                xs[3], ks[2]
            )));
        }
        let (values, out_shape) = {
            let inner = self.graph.inner.borrow();
            spatial::conv2d_forward(
                &inner.nodes[self.id].values,
                &xs,
                &inner.nodes[kernel.id].values,
                &ks,
                stride,
                pad,
            )?
        };
        Ok(self.graph.push(
            out_shape,
            values,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                stride,
                pad,
            },
        ))
    }

    /// Per-window maximum; gradient routes to the first maximum in row-major
    /// order within each window.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::BadRank("maxpool2d", 4, xs));
        }
        if window > xs[1] || window > xs[2] {
            return Err(TensorError::WindowTooLarge {
                window,
                h: xs[1],
                w: xs[2],
            });
        }
        let (values, argmax, out_shape) = {
            let inner = self.graph.inner.borrow();
            spatial::maxpool_forward(&inner.nodes[self.id].values, &xs, window, stride)
        };
        Ok(self
            .graph
            .push(out_shape, values, Op::MaxPool { x: self.id, argmax }))
    }

    /// Differentiable align-corners bilinear resize of [N,H,W,C].
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::BadRank("bilinear_upsample", 4, xs));
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::ZeroSizeTarget(out_h, out_w));
        }
        let values = {
            let inner = self.graph.inner.borrow();
            spatial::bilinear_forward(&inner.nodes[self.id].values, &xs, out_h, out_w)
        };
        let out_shape = vec![xs[0], out_h, out_w, xs[3]];
        Ok(self.graph.push(out_shape, values, Op::Upsample { x: self.id }))
    }

    pub fn pointwise(&self, f: Pointwise) -> Tensor {
        let values: Vec<f64> = self
            .graph
            .inner
            .borrow()
            .nodes[self.id]
            .values
            .iter()
            .map(|&v| match f {
                Pointwise::Relu => v.max(0.0),
                Pointwise::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Pointwise::Tanh => v.tanh(),
            })
            .collect();
        self.graph
            .push(self.shape(), values, Op::Unary { x: self.id, f })
    }

    pub fn relu(&self) -> Tensor {
        self.pointwise(Pointwise::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.pointwise(Pointwise::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.pointwise(Pointwise::Tanh)
    }

    /// Shift-stabilized softmax normalizing jointly over `axes`.
    pub fn softmax(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::BadAxis(a, shape));
            }
        }
        let (groups, group_count) = group_map(&shape, axes);
        let x = self.values();
        let mut max = vec![f64::NEG_INFINITY; group_count];
        for (i, &v) in x.iter().enumerate() {
            let g = groups[i];
            if v > max[g] {
                max[g] = v;
            }
        }
        let mut sums = vec![0.0; group_count];
        let mut out = vec![0.0; x.len()];
        for (i, &v) in x.iter().enumerate() {
            let e = (v - max[groups[i]]).exp();
            out[i] = e;
            sums[groups[i]] += e;
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= sums[groups[i]];
        }
        Ok(self.graph.push(
            shape,
            out,
            Op::Softmax {
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// x·W + b for x [N,Din], W [Din,Dout], b [Dout].
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_graph(w);
        self.same_graph(b);
        let xs = self.shape();
        let ws = w.shape();
        let bs = b.shape();
        if xs.len() != 2 {
            return Err(TensorError::BadRank("affine", 2, xs));
        }
        if ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "affine: x {xs:?} does not match W {ws:?}"
            )));
        }
        if bs != vec![ws[1]] {
            return Err(TensorError::ShapeMismatch(format!(
                "affine: bias {bs:?} does not match W {ws:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let inner = self.graph.inner.borrow();
        let xv = &inner.nodes[self.id].values;
        let wv = &inner.nodes[w.id].values;
        let bv = &inner.nodes[b.id].values;
        let mut out = vec![0.0; n * dout];
        for row in 0..n {
            let out_row = &mut out[row * dout..(row + 1) * dout];
            out_row.copy_from_slice(bv);
            for i in 0..din {
                let xvi = xv[row * din + i];
                if xvi == 0.0 {
                    continue;
                }
                let wrow = &wv[i * dout..(i + 1) * dout];
                for (o, &wv_io) in out_row.iter_mut().zip(wrow) {
                    *o += xvi * wv_io;
                }
            }
        }
        drop(inner);
        Ok(self.graph.push(
            vec![n, dout],
            out,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// Per-channel standardization over all axes but the last. Training mode
    /// uses batch statistics and updates the running buffers in place;
    /// inference mode reads the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
        training: bool,
    ) -> Result<Tensor> {
        self.same_graph(gamma);
        self.same_graph(beta);
        const EPS: f64 = 1e-5;
        let shape = self.shape();
        let channels = *shape.last().ok_or_else(|| {
            TensorError::ShapeMismatch("batchnorm on zero-rank tensor".to_string())
        })?;
        if gamma.shape() != vec![channels] || beta.shape() != vec![channels] {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm: gamma/beta must be [{channels}]"
            )));
        }
        let x = self.values();
        let m = x.len() / channels;
        let (mean, var) = if training {
            let mut mean = vec![0.0; channels];
            for (i, &v) in x.iter().enumerate() {
                mean[i % channels] += v;
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; channels];
            for (i, &v) in x.iter().enumerate() {
                let d = v - mean[i % channels];
                var[i % channels] += d * d;
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            for c in 0..channels {
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let gv = gamma.values();
        let bv = beta.values();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, &v) in x.iter().enumerate() {
            let c = i % channels;
            let h = (v - mean[c]) * inv_std[c];
            xhat[i] = h;
            out[i] = gv[c] * h + bv[c];
        }
        Ok(self.graph.push(
            shape,
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    fn binary(&self, other: &Tensor, f: BinOp) -> Result<Tensor> {
        self.same_graph(other);
        let sa = self.shape();
        let sb = other.shape();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let total: usize = out_shape.iter().product();
        let inner = self.graph.inner.borrow();
        let av = &inner.nodes[self.id].values;
        let bv = &inner.nodes[other.id].values;
        let mut out = vec![0.0; total];
        let mut multi = vec![0usize; out_shape.len()];
        for (i, o) in out.iter_mut().enumerate() {
            multi_index(i, &out_shape, &mut multi);
            let a = av[bcast_src_index(&multi, &sa)];
            let b = bv[bcast_src_index(&multi, &sb)];
            *o = match f {
                BinOp::Add => a + b,
                BinOp::Mul => a * b,
            };
        }
        drop(inner);
        Ok(self.graph.push(
            out_shape,
            out,
            Op::Binary {
                a: self.id,
                b: other.id,
                f,
            },
        ))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let s = self.graph.scalar(factor);
        self.mul(&s).expect("scalar broadcast always compatible")
    }

    fn reduce(&self, f: RedOp, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::BadAxis(a, shape));
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let (groups, group_count) = group_map(&shape, axes);
        debug_assert_eq!(group_count, out_shape.iter().product::<usize>());
        let x = self.values();
        let mut out = vec![0.0; group_count];
        for (i, &v) in x.iter().enumerate() {
            out[groups[i]] += v;
        }
        if f == RedOp::Mean {
            let count = (x.len() / group_count) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        Ok(self.graph.push(
            out_shape,
            out,
            Op::Reduce {
                x: self.id,
                f,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedOp::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedOp::Mean, axes)
    }

    /// Sum over every axis, producing a scalar of shape [1].
    pub fn sum_all(&self) -> Tensor {
        let rank = self.shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(RedOp::Sum, &axes).expect("axes in range")
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let total: usize = shape.iter().product();
        if total != self.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Ok(self.graph.push(shape, self.values(), Op::Reshape { x: self.id }))
    }

    /// Contiguous slice along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis(axis, shape));
        }
        if start + len > shape[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "slice {start}..{} exceeds axis extent {}",
                start + len,
                shape[axis]
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner_len: usize = shape[axis + 1..].iter().product();
        let x = self.values();
        let mut out = Vec::with_capacity(outer * len * inner_len);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner_len;
            out.extend_from_slice(&x[base..base + len * inner_len]);
        }
        Ok(self.graph.push(
            out_shape,
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    assert!(!tensors.is_empty(), "concat of nothing");
    let graph = tensors[0].graph.clone();
    let first = tensors[0].shape();
    if axis >= first.len() {
        return Err(TensorError::BadAxis(axis, first));
    }
    let mut axis_total = 0;
    for t in tensors {
        tensors[0].same_graph(t);
        let s = t.shape();
        if s.len() != first.len()
            || s.iter()
                .enumerate()
                .any(|(d, &e)| d != axis && e != first[d])
        {
            return Err(TensorError::ShapeMismatch(format!(
                "concat: {s:?} vs {first:?}"
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let outer: usize = first[..axis].iter().product();
    let inner_len: usize = first[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let s = t.shape();
            let vals = t.values();
            let chunk = s[axis] * inner_len;
            out.extend_from_slice(&vals[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(graph.push(
        out_shape,
        out,
        Op::Concat {
            parts: tensors.iter().map(|t| t.id).collect(),
            axis,
        },
    ))
}

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::BadRank("cross_entropy", 2, shape));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(TensorError::BadLabel(l, c));
        }
    }
    let x = logits.values();
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for row in 0..n {
        let slice = &x[row * c..(row + 1) * c];
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in slice.iter().enumerate() {
            let e = (v - max).exp();
            probs[row * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[row * c + j] /= sum;
        }
        loss -= probs[row * c + labels[row]].max(1e-300).ln();
    }
    loss /= n as f64;
    Ok(logits.graph.push(
        vec![1],
        vec![loss],
        Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
            probs,
        },
    ))
}

/// Group index per element for reductions/softmax over `axes`: elements that
/// share every non-axis coordinate share a group.
fn group_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let total: usize = shape.iter().product();
    let mut group_count = 1;
    for (d, &e) in shape.iter().enumerate() {
        if !axes.contains(&d) {
            group_count *= e;
        }
    }
    let mut groups = vec![0usize; total];
    let mut multi = vec![0usize; shape.len()];
    for (i, g) in groups.iter_mut().enumerate() {
        multi_index(i, shape, &mut multi);
        let mut idx = 0;
        for (d, &e) in shape.iter().enumerate() {
            if !axes.contains(&d) {
                idx = idx * e + multi[d];
            }
        }
        *g = idx;
    }
    (groups, group_count)
}

/// Reverse-mode accumulation from a scalar loss. Populates node gradients;
/// parameters receive them via `flush_param_grads` / `collect_param_grads`.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape()));
    }
    let mut inner = loss.graph.inner.borrow_mut();
    inner.nodes[loss.id].grad[0] = 1.0;
    for id in (0..=loss.id).rev() {
        let grad = inner.nodes[id].grad.clone();
        if grad.iter().all(|&g| g == 0.0) {
            continue;
        }
        match &inner.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = inner.nodes[x].shape.clone();
                let ks = inner.nodes[k].shape.clone();
                let xv = inner.nodes[x].values.clone();
                let kv = inner.nodes[k].values.clone();
                let out_shape = inner.nodes[id].shape.clone();
                let (dx, dk) =
                    spatial::conv2d_backward(&grad, &out_shape, &xv, &xs, &kv, &ks, stride, pad);
                accumulate(&mut inner.nodes[x].grad, &dx);
                accumulate(&mut inner.nodes[k].grad, &dk);
            }
            Op::MaxPool { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                for (o, &src) in argmax.iter().enumerate() {
                    inner.nodes[x].grad[src] += grad[o];
                }
            }
            Op::Upsample { x } => {
                let x = *x;
                let xs = inner.nodes[x].shape.clone();
                let out_shape = inner.nodes[id].shape.clone();
                let dx = spatial::bilinear_backward(&grad, &out_shape, &xs);
                accumulate(&mut inner.nodes[x].grad, &dx);
            }
            Op::Unary { x, f } => {
                let (x, f) = (*x, *f);
                let y = inner.nodes[id].values.clone();
                let node = &mut inner.nodes[x];
                for i in 0..grad.len() {
                    node.grad[i] += grad[i]
                        * match f {
                            Pointwise::Relu => {
                                if y[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Pointwise::Sigmoid => y[i] * (1.0 - y[i]),
                            Pointwise::Tanh => 1.0 - y[i] * y[i],
                        };
                }
            }
            Op::Softmax { x, axes } => {
                let (x, axes) = (*x, axes.clone());
                let y = inner.nodes[id].values.clone();
                let shape = inner.nodes[id].shape.clone();
                let (groups, group_count) = group_map(&shape, &axes);
                let mut dots = vec![0.0; group_count];
                for i in 0..y.len() {
                    dots[groups[i]] += grad[i] * y[i];
                }
                let node = &mut inner.nodes[x];
                for i in 0..y.len() {
                    node.grad[i] += y[i] * (grad[i] - dots[groups[i]]);
                }
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = inner.nodes[x].shape.clone();
                let ws = inner.nodes[w].shape.clone();
                let (n, din, dout) = (xs[0], xs[1], ws[1]);
                let xv = inner.nodes[x].values.clone();
                let wv = inner.nodes[w].values.clone();
                {
                    let node = &mut inner.nodes[x];
                    for row in 0..n {
                        for i in 0..din {
                            let mut acc = 0.0;
                            for o in 0..dout {
                                acc += grad[row * dout + o] * wv[i * dout + o];
                            }
                            node.grad[row * din + i] += acc;
                        }
                    }
                }
                {
                    let node = &mut inner.nodes[w];
                    for row in 0..n {
                        for i in 0..din {
                            let xvi = xv[row * din + i];
                            if xvi == 0.0 {
                                continue;
                            }
                            for o in 0..dout {
                                node.grad[i * dout + o] += xvi * grad[row * dout + o];
                            }
                        }
                    }
                }
                {
                    let node = &mut inner.nodes[b];
                    for row in 0..n {
                        for o in 0..dout {
                            node.grad[o] += grad[row * dout + o];
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let channels = inv_std.len();
                let m = (grad.len() / channels) as f64;
                let gv = inner.nodes[gamma].values.clone();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for i in 0..grad.len() {
                    let c = i % channels;
                    dgamma[c] += grad[i] * xhat[i];
                    dbeta[c] += grad[i];
                }
                {
                    let node = &mut inner.nodes[x];
                    if training {
                        for i in 0..grad.len() {
                            let c = i % channels;
                            node.grad[i] += gv[c] * inv_std[c] / m
                                * (m * grad[i] - dbeta[c] - xhat[i] * dgamma[c]);
                        }
                    } else {
                        for i in 0..grad.len() {
                            let c = i % channels;
                            node.grad[i] += grad[i] * gv[c] * inv_std[c];
                        }
                    }
                }
                accumulate(&mut inner.nodes[gamma].grad, &dgamma);
                accumulate(&mut inner.nodes[beta].grad, &dbeta);
            }
            Op::Binary { a, b, f } => {
                let (a, b, f) = (*a, *b, *f);
                let out_shape = inner.nodes[id].shape.clone();
                let sa = inner.nodes[a].shape.clone();
                let sb = inner.nodes[b].shape.clone();
                let av = inner.nodes[a].values.clone();
                let bv = inner.nodes[b].values.clone();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let mut multi = vec![0usize; out_shape.len()];
                for (i, &g) in grad.iter().enumerate() {
                    multi_index(i, &out_shape, &mut multi);
                    let ia = bcast_src_index(&multi, &sa);
                    let ib = bcast_src_index(&multi, &sb);
                    match f {
                        BinOp::Add => {
                            da[ia] += g;
                            db[ib] += g;
                        }
                        BinOp::Mul => {
                            da[ia] += g * bv[ib];
                            db[ib] += g * av[ia];
                        }
                    }
                }
                accumulate(&mut inner.nodes[a].grad, &da);
                accumulate(&mut inner.nodes[b].grad, &db);
            }
            Op::Reduce { x, f, axes } => {
                let (x, f, axes) = (*x, *f, axes.clone());
                let shape = inner.nodes[x].shape.clone();
                let (groups, group_count) = group_map(&shape, &axes);
                let scale = match f {
                    RedOp::Sum => 1.0,
                    RedOp::Mean => group_count as f64 / shape.iter().product::<usize>() as f64,
                };
                let node = &mut inner.nodes[x];
                for i in 0..node.grad.len() {
                    node.grad[i] += grad[groups[i]] * scale;
                }
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let out_shape = inner.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner_len: usize = out_shape[axis + 1..].iter().product();
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in &parts {
                    let extent = inner.nodes[p].shape[axis];
                    offsets.push((p, acc, extent));
                    acc += extent;
                }
                for (p, offset, extent) in offsets {
                    let chunk = extent * inner_len;
                    let node = &mut inner.nodes[p];
                    for o in 0..outer {
                        let src = (o * out_shape[axis] + offset) * inner_len;
                        for j in 0..chunk {
                            node.grad[o * chunk + j] += grad[src + j];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let xs = inner.nodes[x].shape.clone();
                let out_shape = inner.nodes[id].shape.clone();
                let outer: usize = xs[..axis].iter().product();
                let inner_len: usize = xs[axis + 1..].iter().product();
                let len = out_shape[axis];
                let node = &mut inner.nodes[x];
                for o in 0..outer {
                    let dst = (o * xs[axis] + start) * inner_len;
                    for j in 0..len * inner_len {
                        node.grad[dst + j] += grad[o * len * inner_len + j];
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                accumulate(&mut inner.nodes[x].grad, &grad);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (logits, labels, probs) = (*logits, labels.clone(), probs.clone());
                let n = labels.len();
                let c = probs.len() / n;
                let g0 = grad[0];
                let node = &mut inner.nodes[logits];
                for row in 0..n {
                    for j in 0..c {
                        let indicator = if j == labels[row] { 1.0 } else { 0.0 };
                        node.grad[row * c + j] += g0 * (probs[row * c + j] - indicator) / n as f64;
                    }
                }
            }
        }
    }
    Ok(())
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Classical momentum update: v ← μ·v + g, p ← p − lr·v.
pub fn sgd_step(values: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    assert!(lr > 0.0, "learning rate must be positive");
    for i in 0..values.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        values[i] -= lr * velocity[i];
    }
}

/// SGD with momentum over shared parameters; velocity is kept per parameter.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Parameter]) {
        for param in params {
            if !param.is_trainable() {
                continue;
            }
            let key = param.key();
            let mut data = param.lock();
            let vel = self
                .velocity
                .entry(key)
                .or_insert_with(|| vec![0.0; data.values.len()]);
            let grads = data.grad.clone();
            sgd_step(&mut data.values, &grads, vel, self.lr, self.momentum);
        }
    }
}

#[cfg(test)]
mod tests;
