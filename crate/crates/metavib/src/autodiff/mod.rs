//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! The engine is define-by-run: a [`Tape`] records every primitive applied
//! to tensors that trace back to a registered leaf, and [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. Tensors without
//! a node id are constants; operating on constants alone computes the
//! value without recording anything. A tape and its tensors belong to one
//! training run; the heavy kernels may fork-join internally (see
//! [`kernels`]) but the tape itself is never shared.

pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
pub use kernels::{Padding, PatchLayout, WindowGeom};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle of a recorded node; only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Dense row-major f64 tensor, optionally linked to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the data; clones the buffer only if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no tape link.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pointwise unary primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Elu,
    Exp,
    Log,
    Neg,
}

/// Pointwise binary primitives with trailing-dimension broadcasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

enum OpRecord {
    Leaf,
    Matmul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Conv2d {
        layout: PatchLayout,
        cout: usize,
        bias: bool,
        relu: bool,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_len: usize,
    },
    Unary(UnaryOp),
    Clamp {
        lo: f64,
        hi: f64,
    },
    Binary(BinaryOp),
    LogSumExp {
        cols: usize,
    },
    Reduce {
        op: ReduceOp,
        axis: Option<usize>,
    },
    Reshape,
    Concat {
        axis: usize,
        extents: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
}

struct Node {
    op: OpRecord,
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    out_data: Arc<Vec<f64>>,
}

/// Gradients produced by one backward pass, addressed by tensor.
pub struct GradientMap {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    /// Gradient of the backward root with respect to `t`, if any reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index).and_then(|g| g.as_deref())
    }

    /// Gradient for `t`, densified to zeros when nothing reached it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])
    }
}

/// The recording tape. Rebuilt for every loss evaluation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let av = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let bv = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if av == bv || bv == 1 {
            av
        } else if av == 1 {
            bv
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides into a tensor of `shape` when iterated inside `out_shape`
/// (broadcast dims get stride 0).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn binary_eval(op: BinaryOp, a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    if a.shape() == b.shape() {
        kernels::zip_map(a.data(), b.data(), &mut out, f);
        return out;
    }
    // Suffix tiling: the smaller operand repeats over the leading axes.
    let suffix_of = |small: &Tensor, big: &Tensor| {
        let trimmed: Vec<usize> = small
            .shape()
            .iter()
            .copied()
            .skip_while(|&e| e == 1)
            .collect();
        !trimmed.is_empty()
            && big.shape().len() >= trimmed.len()
            && big.shape()[big.shape().len() - trimmed.len()..] == trimmed[..]
            && big.shape() == out_shape
    };
    if b.len() == 1 && a.shape() == out_shape {
        let bv = b.data()[0];
        kernels::unary_map(a.data(), &mut out, |x| f(x, bv));
    } else if a.len() == 1 && b.shape() == out_shape {
        let av = a.data()[0];
        kernels::unary_map(b.data(), &mut out, |y| f(av, y));
    } else if suffix_of(b, a) {
        let chunk = b.len();
        for (o_chunk, a_chunk) in out.chunks_mut(chunk).zip(a.data().chunks(chunk)) {
            for ((o, &x), &y) in o_chunk.iter_mut().zip(a_chunk).zip(b.data()) {
                *o = f(x, y);
            }
        }
    } else if suffix_of(a, b) {
        let chunk = a.len();
        for (o_chunk, b_chunk) in out.chunks_mut(chunk).zip(b.data().chunks(chunk)) {
            for ((o, &y), &x) in o_chunk.iter_mut().zip(b_chunk).zip(a.data()) {
                *o = f(x, y);
            }
        }
    } else {
        // General case: odometer walk with per-operand broadcast strides.
        let rank = out_shape.len();
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        let mut idx = vec![0usize; rank];
        let (mut oa, mut ob) = (0usize, 0usize);
        for o in out.iter_mut() {
            *o = f(a.data()[oa], b.data()[ob]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                oa -= sa[d] * out_shape[d];
                ob -= sb[d] * out_shape[d];
            }
        }
    }
    out
}

/// Sum `g` (of shape `from`) down to `to`, undoing broadcasting.
fn reduce_to_shape(g: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return g.to_vec();
    }
    let rank = from.len();
    let strides = broadcast_strides(to, from);
    let out_len: usize = to.iter().product::<usize>().max(1);
    let mut out = vec![0.0; out_len];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &gv in g {
        out[off] += gv;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * from[d];
        }
    }
    out
}

/// Raises the malloc mmap threshold once per process. Activation tensors
/// and gradient buffers in the tens of megabytes are allocated and freed
/// every iteration; served from the heap they get recycled, served from
/// fresh mmaps they cost a page-fault storm per step.
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    });
}

impl Tape {
    pub fn new() -> Tape {
        tune_allocator();
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check_input(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if let Some(node) = t.node {
            if node.tape != self.id {
                return Err(Error::Contract(format!(
                    "{op}: tensor belongs to a different tape"
                )));
            }
        }
        Ok(())
    }

    fn push(&mut self, op: OpRecord, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.push_shared(op, inputs, shape, Arc::new(data))
    }

    fn push_shared(
        &mut self,
        op: OpRecord,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
    ) -> Tensor {
        let recorded = matches!(op, OpRecord::Leaf) || inputs.iter().any(|t| t.node.is_some());
        if !recorded {
            return Tensor {
                shape,
                data,
                node: None,
            };
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            out_shape: shape.clone(),
            out_data: Arc::clone(&data),
        });
        Tensor {
            shape,
            data,
            node: Some(NodeId { tape: self.id, index }),
        }
    }

    /// Register `t`'s value as a differentiable leaf on this tape. The
    /// buffer is shared, not copied; parameter updates copy-on-write.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push_shared(OpRecord::Leaf, vec![], t.shape.clone(), Arc::clone(&t.data))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_input("matmul", a)?;
        self.check_input("matmul", b)?;
        let (ashape, bshape) = (a.shape(), b.shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(a.data(), b.data(), m, k, n, &mut out);
        Ok(self.push(
            OpRecord::Matmul { m, k, n },
            vec![a.clone(), b.clone()],
            vec![m, n],
            out,
        ))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_input("transpose", a)?;
        if a.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        kernels::transpose(a.data(), rows, cols, &mut out);
        Ok(self.push(
            OpRecord::Transpose { rows, cols },
            vec![a.clone()],
            vec![cols, rows],
            out,
        ))
    }

    /// 2-D cross-correlation over NHWC input with an HWIO kernel.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        self.conv2d_fused(x, kernel, None, false, stride, padding)
    }

    /// Convolution with the bias add and optional relu folded into the
    /// same output pass; algebraically identical to conv2d + add + relu
    /// but without materializing the intermediates.
    pub fn conv2d_fused(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        relu: bool,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        self.check_input("conv2d", x)?;
        self.check_input("conv2d", kernel)?;
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if let Some(b) = bias {
            self.check_input("conv2d", b)?;
            if b.shape() != [cout] {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: b.shape().to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let geom = WindowGeom::compute(h, w, kh, kw, stride, padding)?;
        let layout = PatchLayout {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            geom,
        };
        let mut out = vec![0.0; layout.rows() * cout];
        kernels::with_scratch(layout.rows() * layout.cols(), |patches| {
            kernels::im2col(x.data(), &layout, patches);
            kernels::matmul(patches, kernel.data(), layout.rows(), layout.cols(), cout, &mut out);
        });
        if let Some(b) = bias {
            let bd = b.data();
            if relu {
                for row in out.chunks_mut(cout) {
                    for (o, &bv) in row.iter_mut().zip(bd) {
                        *o = (*o + bv).max(0.0);
                    }
                }
            } else {
                for row in out.chunks_mut(cout) {
                    for (o, &bv) in row.iter_mut().zip(bd) {
                        *o += bv;
                    }
                }
            }
        } else if relu {
            for o in out.iter_mut() {
                *o = o.max(0.0);
            }
        }
        let mut inputs = vec![x.clone(), kernel.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(self.push(
            OpRecord::Conv2d {
                layout,
                cout,
                bias: bias.is_some(),
                relu,
            },
            inputs,
            vec![batch, geom.oh, geom.ow, cout],
            out,
        ))
    }

    /// Windowed maximum over NHWC input; gradient flows to the first
    /// occurrence of the maximum in each window.
    pub fn maxpool2d(
        &mut self,
        x: &Tensor,
        window: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        self.check_input("maxpool2d", x)?;
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "maxpool2d",
                lhs: xs.to_vec(),
                rhs: vec![],
            });
        }
        let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = window;
        let geom = WindowGeom::compute(h, w, kh, kw, stride, padding)?;
        let layout = PatchLayout {
            batch,
            h,
            w,
            cin: c,
            kh,
            kw,
            stride,
            geom,
        };
        let out_len = batch * geom.oh * geom.ow * c;
        let mut out = vec![0.0; out_len];
        let mut argmax = vec![usize::MAX; out_len];
        kernels::maxpool_forward(x.data(), &layout, &mut out, &mut argmax);
        Ok(self.push(
            OpRecord::MaxPool {
                argmax,
                input_len: x.len(),
            },
            vec![x.clone()],
            vec![batch, geom.oh, geom.ow, c],
            out,
        ))
    }

    pub fn unary(&mut self, x: &Tensor, op: UnaryOp) -> Result<Tensor> {
        self.check_input("elementwise", x)?;
        if op == UnaryOp::Log {
            if let Some(&bad) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let mut out = vec![0.0; x.len()];
        let f = |v: f64| match op {
            UnaryOp::Relu => v.max(0.0),
            UnaryOp::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Neg => -v,
        };
        kernels::unary_map(x.data(), &mut out, f);
        Ok(self.push(OpRecord::Unary(op), vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, UnaryOp::Relu)
    }

    pub fn elu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, UnaryOp::Elu)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, UnaryOp::Log)
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, UnaryOp::Neg)
    }

    /// Pointwise clamp; gradient passes through inside the closed range.
    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.check_input("clamp", x)?;
        let mut out = vec![0.0; x.len()];
        kernels::unary_map(x.data(), &mut out, |v| v.clamp(lo, hi));
        Ok(self.push(OpRecord::Clamp { lo, hi }, vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn binary(&mut self, a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
        self.check_input("elementwise", a)?;
        self.check_input("elementwise", b)?;
        let op_name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let out_shape = broadcast_shape(op_name, a.shape(), b.shape())?;
        let out = binary_eval(op, a, b, &out_shape);
        Ok(self.push(OpRecord::Binary(op), vec![a.clone(), b.clone()], out_shape, out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// x * c for a scalar constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.mul(x, &Tensor::scalar(c))
    }

    /// x + c for a scalar constant.
    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.add(x, &Tensor::scalar(c))
    }

    /// log-sum-exp over the last axis, computed with a max shift.
    pub fn logsumexp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input("logsumexp", x)?;
        if x.shape().is_empty() || *x.shape().last().unwrap() == 0 {
            return Err(Error::Shape {
                op: "logsumexp",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let cols = *x.shape().last().unwrap();
        let rows = x.len() / cols;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out[r] = m + s.ln();
        }
        let out_shape = x.shape()[..x.shape().len() - 1].to_vec();
        Ok(self.push(OpRecord::LogSumExp { cols }, vec![x.clone()], out_shape, out))
    }

    pub fn reduce(&mut self, x: &Tensor, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        self.check_input("reduce", x)?;
        match axis {
            None => {
                let n = x.len();
                if op == ReduceOp::Mean && n == 0 {
                    return Err(Error::Parameter("mean of an empty tensor".into()));
                }
                let total: f64 = x.data().iter().sum();
                let v = match op {
                    ReduceOp::Sum => total,
                    ReduceOp::Mean => total / n as f64,
                };
                Ok(self.push(OpRecord::Reduce { op, axis }, vec![x.clone()], vec![], vec![v]))
            }
            Some(ax) => {
                if ax >= x.shape().len() {
                    return Err(Error::Parameter(format!(
                        "reduce axis {ax} out of range for shape {:?}",
                        x.shape()
                    )));
                }
                let mid = x.shape()[ax];
                if op == ReduceOp::Mean && mid == 0 {
                    return Err(Error::Parameter("mean over an empty axis".into()));
                }
                let outer: usize = x.shape()[..ax].iter().product();
                let inner: usize = x.shape()[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let src = &x.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / mid as f64;
                    for v in out.iter_mut() {
                        *v *= inv;
                    }
                }
                let mut out_shape = x.shape().to_vec();
                out_shape.remove(ax);
                Ok(self.push(OpRecord::Reduce { op, axis }, vec![x.clone()], out_shape, out))
            }
        }
    }

    pub fn sum(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(x, ReduceOp::Sum, axis)
    }

    pub fn mean(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(x, ReduceOp::Mean, axis)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_input("reshape", x)?;
        let expect: usize = shape.iter().product();
        if expect != x.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(self.push(OpRecord::Reshape, vec![x.clone()], shape, x.data().to_vec()))
    }

    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Parameter("concat of zero tensors".into()));
        }
        for x in xs {
            self.check_input("concat", x)?;
        }
        let rank = xs[0].shape().len();
        if axis >= rank {
            return Err(Error::Parameter(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for x in &xs[1..] {
            if x.shape().len() != rank
                || x.shape()
                    .iter()
                    .zip(xs[0].shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: xs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        let extents: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total_axis: usize = extents.iter().sum();
        let mut out_shape = xs[0].shape().to_vec();
        out_shape[axis] = total_axis;
        let outer: usize = out_shape[..axis].iter().product();
        let tail: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut at = 0usize;
        for (x, &e) in xs.iter().zip(extents.iter()) {
            let chunk = e * tail;
            for o in 0..outer {
                let dst = (o * total_axis + at) * tail;
                out[dst..dst + chunk].copy_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
            at += e;
        }
        Ok(self.push(OpRecord::Concat { axis, extents }, xs.to_vec(), out_shape, out))
    }

    /// Contiguous rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check_input("slice_rows", x)?;
        if x.shape().is_empty() || start + len > x.shape()[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let item: usize = x.shape()[1..].iter().product();
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = len;
        let data = x.data()[start * item..(start + len) * item].to_vec();
        Ok(self.push(OpRecord::SliceRows { start }, vec![x.clone()], out_shape, data))
    }

    /// Reverse sweep from a recorded scalar root. Gradient accumulators
    /// are freshly zeroed; the root receives a gradient of one.
    pub fn backward(&self, root: &Tensor) -> Result<GradientMap> {
        let node = root.node.ok_or_else(|| {
            Error::Contract("backward root is not recorded on any tape".into())
        })?;
        if node.tape != self.id {
            return Err(Error::Contract("backward root belongs to a different tape".into()));
        }
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![1.0]);
        for idx in (0..=node.index).rev() {
            let (lower, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            self.backward_node(idx, g, lower);
        }
        Ok(GradientMap {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, idx: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |input: &Tensor, contribution: Vec<f64>| {
            if let Some(n) = input.node {
                debug_assert!(n.index < idx, "tape order violated");
                match &mut lower[n.index] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution.iter()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
        };

        match &node.op {
            OpRecord::Leaf => {}
            OpRecord::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                if a.node.is_some() {
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose(b.data(), k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut da);
                    send(a, da);
                }
                if b.node.is_some() {
                    let mut db = vec![0.0; k * n];
                    kernels::gram(a.data(), g, m, k, n, &mut db);
                    send(b, db);
                }
            }
            OpRecord::Transpose { rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                kernels::transpose(g, *cols, *rows, &mut dx);
                send(&node.inputs[0], dx);
            }
            OpRecord::Conv2d {
                layout,
                cout,
                bias,
                relu,
            } => {
                let x = &node.inputs[0];
                let kernel = &node.inputs[1];
                let rows = layout.rows();
                let cols = layout.cols();
                // Relu mask applies before everything else; the saved
                // output is the post-activation value.
                let masked: std::borrow::Cow<[f64]> = if *relu {
                    let y = &node.out_data;
                    std::borrow::Cow::Owned(
                        g.iter()
                            .zip(y.iter())
                            .map(|(&gv, &yv)| if yv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )
                } else {
                    std::borrow::Cow::Borrowed(g)
                };
                let g = masked.as_ref();
                if *bias {
                    let b = &node.inputs[2];
                    if b.node.is_some() {
                        let mut db = vec![0.0; *cout];
                        for row in g.chunks(*cout) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        send(b, db);
                    }
                }
                if kernel.node.is_some() {
                    let mut dk = vec![0.0; cols * cout];
                    kernels::with_scratch(rows * cols, |patches| {
                        kernels::im2col(x.data(), layout, patches);
                        kernels::gram(patches, g, rows, cols, *cout, &mut dk);
                    });
                    send(kernel, dk);
                }
                if x.node.is_some() {
                    let mut kt = vec![0.0; cols * cout];
                    kernels::transpose(kernel.data(), cols, *cout, &mut kt);
                    let mut dx = vec![0.0; x.len()];
                    kernels::with_scratch(rows * cols, |dpatches| {
                        kernels::matmul(g, &kt, rows, *cout, cols, dpatches);
                        kernels::col2im(dpatches, layout, &mut dx);
                    });
                    send(x, dx);
                }
            }
            OpRecord::MaxPool { argmax, input_len } => {
                let mut dx = vec![0.0; *input_len];
                kernels::maxpool_backward(g, argmax, &mut dx);
                send(&node.inputs[0], dx);
            }
            OpRecord::Unary(op) => {
                let x = node.inputs[0].data();
                let y = &node.out_data;
                let mut dx = vec![0.0; x.len()];
                match op {
                    UnaryOp::Relu => {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                            *d = if xv > 0.0 { gv } else { 0.0 };
                        }
                    }
                    UnaryOp::Elu => {
                        for (((d, &gv), &xv), &yv) in dx.iter_mut().zip(g).zip(x).zip(y.iter()) {
                            *d = if xv > 0.0 { gv } else { gv * (yv + 1.0) };
                        }
                    }
                    UnaryOp::Exp => {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y.iter()) {
                            *d = gv * yv;
                        }
                    }
                    UnaryOp::Log => {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                            *d = gv / xv;
                        }
                    }
                    UnaryOp::Neg => {
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d = -gv;
                        }
                    }
                }
                send(&node.inputs[0], dx);
            }
            OpRecord::Clamp { lo, hi } => {
                let x = node.inputs[0].data();
                let mut dx = vec![0.0; x.len()];
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                    *d = if xv >= *lo && xv <= *hi { gv } else { 0.0 };
                }
                send(&node.inputs[0], dx);
            }
            OpRecord::Binary(op) => {
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                let out_shape = &node.out_shape;
                match op {
                    BinaryOp::Add => {
                        if a.node.is_some() {
                            send(a, reduce_to_shape(g, out_shape, a.shape()));
                        }
                        if b.node.is_some() {
                            send(b, reduce_to_shape(g, out_shape, b.shape()));
                        }
                    }
                    BinaryOp::Sub => {
                        if a.node.is_some() {
                            send(a, reduce_to_shape(g, out_shape, a.shape()));
                        }
                        if b.node.is_some() {
                            let mut db = reduce_to_shape(g, out_shape, b.shape());
                            for v in db.iter_mut() {
                                *v = -*v;
                            }
                            send(b, db);
                        }
                    }
                    BinaryOp::Mul => {
                        if a.node.is_some() {
                            let gb = binary_eval(
                                BinaryOp::Mul,
                                &with_data(g, out_shape),
                                &b.detach(),
                                out_shape,
                            );
                            send(a, reduce_to_shape(&gb, out_shape, a.shape()));
                        }
                        if b.node.is_some() {
                            let ga = binary_eval(
                                BinaryOp::Mul,
                                &with_data(g, out_shape),
                                &a.detach(),
                                out_shape,
                            );
                            send(b, reduce_to_shape(&ga, out_shape, b.shape()));
                        }
                    }
                }
            }
            OpRecord::LogSumExp { cols } => {
                let x = node.inputs[0].data();
                let y = &node.out_data;
                let mut dx = vec![0.0; x.len()];
                for r in 0..y.len() {
                    let gv = g[r];
                    let yr = y[r];
                    for c in 0..*cols {
                        dx[r * cols + c] = gv * (x[r * cols + c] - yr).exp();
                    }
                }
                send(&node.inputs[0], dx);
            }
            OpRecord::Reduce { op, axis } => {
                let x = &node.inputs[0];
                let mut dx = vec![0.0; x.len()];
                match axis {
                    None => {
                        let scale = match op {
                            ReduceOp::Sum => g[0],
                            ReduceOp::Mean => g[0] / x.len() as f64,
                        };
                        dx.fill(scale);
                    }
                    Some(ax) => {
                        let mid = x.shape()[*ax];
                        let outer: usize = x.shape()[..*ax].iter().product();
                        let inner: usize = x.shape()[*ax + 1..].iter().product();
                        let scale = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / mid as f64,
                        };
                        for o in 0..outer {
                            for m in 0..mid {
                                let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                    *d = s * scale;
                                }
                            }
                        }
                    }
                }
                send(x, dx);
            }
            OpRecord::Reshape => {
                send(&node.inputs[0], g.to_vec());
            }
            OpRecord::SliceRows { start } => {
                let x = &node.inputs[0];
                let item: usize = x.shape()[1..].iter().product();
                let mut dx = vec![0.0; x.len()];
                dx[start * item..start * item + g.len()].copy_from_slice(g);
                send(x, dx);
            }
            OpRecord::Concat { axis, extents } => {
                let out_shape = &node.out_shape;
                let total_axis = out_shape[*axis];
                let outer: usize = out_shape[..*axis].iter().product();
                let tail: usize = out_shape[*axis + 1..].iter().product();
                let mut at = 0usize;
                for (input, &e) in node.inputs.iter().zip(extents.iter()) {
                    if input.node.is_some() {
                        let chunk = e * tail;
                        let mut dx = vec![0.0; input.len()];
                        for o in 0..outer {
                            let src = (o * total_axis + at) * tail;
                            dx[o * chunk..(o + 1) * chunk].copy_from_slice(&g[src..src + chunk]);
                        }
                        send(input, dx);
                    }
                    at += e;
                }
            }
        }
    }
}

/// Borrow `data` as a constant tensor of `shape` (for vjp arithmetic).
fn with_data(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data: Arc::new(data.to_vec()),
        node: None,
    }
}
