//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so the node list is already topologically sorted. [`Tape::backward`] walks
//! it once in reverse. Tapes are rebuilt for each forward pass and own all of
//! their values, which makes them `Send`: independent forward passes can run
//! on separate threads and have their leaf gradients reduced afterwards.
//!
//! Every reduction runs sequentially inside a single output element, so the
//! same inputs always produce bit-identical results.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    LastAxis,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bcast: Bcast },
    Sub { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { x: Var, factor: f64 },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MeanOf(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    MaskMul { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Dynamic computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a · op(b)` (+ `beta · c`), all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided index ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Gradients accumulate on leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok(Bcast::Same)
        } else if sb.len() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.ndim() == 1 && sb.len() == sa.last_dim() {
            Ok(Bcast::LastAxis)
        } else {
            Err(Error::dim(format!(
                "cannot broadcast {:?} against {:?}",
                sb.shape(),
                sa.shape()
            )))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<f64> = match bc {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::LastAxis => {
                let d = bv.len();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % d]))
                    .collect()
            }
        };
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, mk(a, b, bc), rg))
    }

    /// Elementwise sum; `b` may be a scalar or a vector along the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b, bcast| Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b, bcast| Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b, bcast| Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || {
            Error::dim(format!(
                "matmul{} of {:?} and {:?}",
                if trans_b { " (b transposed)" } else { "" },
                av.shape(),
                bv.shape()
            ))
        };
        let (m, k) = av.dims2().map_err(|_| mismatch())?;
        let (br, bc) = bv.dims2().map_err(|_| mismatch())?;
        let (kb, n, bstride) = if trans_b {
            (bc, br, (1, bc))
        } else {
            (br, bc, (bc, 1))
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), bstride, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape(), out).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim(format!(
                "layer norm over width {d} given gain {:?} and bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x[C_in×H×W]` with `weight[C_out×C_in×k×k]` plus `bias[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (ci, h, w) = match xv.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (co, wci, k) = match wv.shape() {
            &[o, i, kh, kw] if kh == kw => (o, i, kh),
            s => {
                return Err(Error::dim(format!(
                    "conv2d weight must be C_out×C_in×k×k, got {s:?}"
                )))
            }
        };
        if wci != ci {
            return Err(Error::dim(format!(
                "conv2d input {:?} has {ci} channels, weight {:?} expects {wci}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.shape() != [co] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} does not match {co} output channels",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride,
            padding,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; co * ncol];
        for (o, chunk) in out.chunks_mut(ncol).enumerate() {
            chunk.fill(bv.data()[o]);
        }
        gemm(
            co,
            rows,
            ncol,
            wv.data(),
            (rows, 1),
            &cols,
            (ncol, 1),
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[co, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let src = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[r, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ColSlice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim(format!(
                    "concat rows disagree: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[r, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over the rows of a 2-D tensor: `[T×D] → [D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = xv.dims2()?;
        let mut out = vec![0.0; d];
        for row in xv.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        let value = Tensor::new(&[d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Elementwise mean of same-shape tensors, summed in list order.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::input("mean of an empty list"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim(format!(
                    "mean of mismatched shapes {shape:?} and {:?}",
                    self.shape(x)
                )));
            }
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += v;
            }
        }
        let n = xs.len() as f64;
        for o in &mut out {
            *o /= n;
        }
        let value = Tensor::new(&shape, out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::MeanOf(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Multiply by a fixed elementwise mask (used for dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim(format!(
                "mask of {} elements for tensor {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskMul { x, mask }, rg))
    }

    /// Back-propagate from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2().expect("checked in forward");
                let n = node.value.shape()[1];
                if rg(*a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    if *trans_b {
                        // dA = G·B, B is n×k
                        gemm(m, n, k, g, (n, 1), bv.data(), (k, 1), 1.0, da);
                    } else {
                        // dA = G·Bᵀ, B is k×n
                        gemm(m, n, k, g, (n, 1), bv.data(), (1, n), 1.0, da);
                    }
                }
                if rg(*b) {
                    let db = accumulate(&mut grads[b.0], k * n);
                    if *trans_b {
                        // dB = Gᵀ·A, n×k
                        gemm(n, m, k, g, (1, n), av.data(), (k, 1), 1.0, db);
                    } else {
                        // dB = Aᵀ·G, k×n
                        gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, db);
                    }
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if rg(*b) {
                    let blen = val(*b).len();
                    let db = accumulate(&mut grads[b.0], blen);
                    reduce_bcast(db, g, *bcast, |gv, _| sign * gv);
                }
            }
            Op::Mul { a, b, bcast } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    match bcast {
                        Bcast::Same => {
                            for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                                *d += gv * y;
                            }
                        }
                        Bcast::Scalar => {
                            for (d, gv) in da.iter_mut().zip(g) {
                                *d += gv * bv[0];
                            }
                        }
                        Bcast::LastAxis => {
                            let w = bv.len();
                            for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                                *d += gv * bv[j % w];
                            }
                        }
                    }
                }
                if rg(*b) {
                    let db = accumulate(&mut grads[b.0], bv.len());
                    reduce_bcast(db, g, *bcast, |gv, j| gv * av[j]);
                }
            }
            Op::Scale { x, factor } => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gv * gelu_grad_scalar(v);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((drow, grow), yrow) in dx.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain).data();
                if rg(*gain) {
                    let dg = accumulate(&mut grads[gain.0], d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if rg(*bias) {
                    let db = accumulate(&mut grads[bias.0], d);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                }
                if rg(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (rows, ncol, co) = (geom.col_rows(), geom.col_cols(), geom.out_channels);
                if rg(*bias) {
                    let db = accumulate(&mut grads[bias.0], co);
                    for (o, grow) in g.chunks(ncol).enumerate() {
                        db[o] += grow.iter().sum::<f64>();
                    }
                }
                if rg(*weight) {
                    // dW = G · colsᵀ
                    let dw = accumulate(&mut grads[weight.0], co * rows);
                    gemm(co, ncol, rows, g, (ncol, 1), cols, (1, ncol), 1.0, dw);
                }
                if rg(*x) {
                    // dcols = Wᵀ · G
                    let wv = val(*weight).data();
                    let mut dcols = vec![0.0; rows * ncol];
                    gemm(rows, co, ncol, wv, (1, rows), g, (ncol, 1), 0.0, &mut dcols);
                    let dx = accumulate(&mut grads[x.0], geom.in_channels * geom.in_h * geom.in_w);
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().expect("2-D");
                // output is r×c, input was c×r
                let dx = accumulate(&mut grads[x.0], g.len());
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::ColSlice { x, start } => {
                let (r, len) = node.value.dims2().expect("2-D");
                let c = val(*x).shape()[1];
                let dx = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().expect("2-D");
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if rg(p) {
                        let dp = accumulate(&mut grads[p.0], r * w);
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                let (t, d) = val(*x).dims2().expect("2-D");
                let dx = accumulate(&mut grads[x.0], t * d);
                let inv = 1.0 / t as f64;
                for row in dx.chunks_mut(d) {
                    for (dv, gv) in row.iter_mut().zip(g) {
                        *dv += gv * inv;
                    }
                }
            }
            Op::MeanOf(xs) => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    if rg(x) {
                        let dx = accumulate(&mut grads[x.0], g.len());
                        for (d, gv) in dx.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                let dx = accumulate(&mut grads[x.0], n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                let dx = accumulate(&mut grads[x.0], n);
                let s = g[0] / n as f64;
                for d in dx.iter_mut() {
                    *d += s;
                }
            }
            Op::MaskMul { x, mask } => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
    }
}

/// Fold an output gradient back onto a (possibly broadcast) right operand.
fn reduce_bcast(db: &mut [f64], g: &[f64], bcast: Bcast, f: impl Fn(f64, usize) -> f64) {
    match bcast {
        Bcast::Same => {
            for (j, (d, &gv)) in db.iter_mut().zip(g).enumerate() {
                *d += f(gv, j);
            }
        }
        Bcast::Scalar => {
            let mut s = 0.0;
            for (j, &gv) in g.iter().enumerate() {
                s += f(gv, j);
            }
            db[0] += s;
        }
        Bcast::LastAxis => {
            let w = db.len();
            for (j, &gv) in g.iter().enumerate() {
                db[j % w] += f(gv, j);
            }
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        in_channels,
        kernel: k,
        stride: s,
        padding: p,
        in_h,
        in_w,
        out_h,
        out_w,
        ..
    } = *geom;
    let ncol = out_h * out_w;
    let mut cols = vec![0.0; in_channels * k * k * ncol];
    for c in 0..in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let src = &x[(c * in_h + iy as usize) * in_w..][..in_w];
                    for ox in 0..out_w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < in_w as isize {
                            dst[oy * out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        in_channels,
        kernel: k,
        stride: s,
        padding: p,
        in_h,
        in_w,
        out_h,
        out_w,
        ..
    } = *geom;
    let ncol = out_h * out_w;
    for c in 0..in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcols[row * ncol..(row + 1) * ncol];
                for oy in 0..out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let base = (c * in_h + iy as usize) * in_w;
                    for ox in 0..out_w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < in_w as isize {
                            dx[base + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
