//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and a rule for
//! pushing output gradients back to its inputs. [`Tape::backward`] replays
//! the nodes in reverse insertion order, which is a valid topological order
//! because inputs always precede the nodes that consume them.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    /// Adds `b[c]` along axis 1 of `x`.
    ChannelBias { x: Var, b: Var },
    /// Adds `b[n]` to every row of an `[m, n]` matrix.
    RowBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, var: Vec<T>, inv_std: Vec<T>, training: bool },
    Resize { x: Var, planes: usize, from: (usize, usize), to: (usize, usize) },
    GlobalAvgPool { x: Var, plane: usize },
    AvgPool2 { x: Var, planes: usize, h: usize, w: usize },
    Reshape(Var),
    /// `[G, C, h, w]` to `[G*h*w, C]`.
    NchwToTokens { x: Var, g: usize, c: usize, plane: usize },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize, count: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Sum(Var),
    PpaLoss { logits: Var, gt: Vec<T>, weights: Vec<T>, batch: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            strict: false,
        }
    }

    /// A tape that rejects non-finite values in every forward output and
    /// every gradient.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::new()
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.strict && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "forward output of {} is not finite",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf holding a copy of `t`; it is differentiable when `t`
    /// tracks gradients.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.input(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.input(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(numel(&shape), value.len(), "leaf shape/data mismatch");
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Batch statistics recorded by a training-mode [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, training: true, .. } => {
                let shape = &self.nodes[v.0].shape;
                Some(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: shape[0] * shape[2..].iter().product::<usize>(),
                })
            }
            _ => None,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // linear algebra

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul expects matrices, got {sa:?} and {sb:?}"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(dim_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, m as isize) } else { (ka as isize, 1) };
        let (rsb, csb) = if tb { (1, ka as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            self.value(a),
            rsa,
            csa,
            self.value(b),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatMul { a, b, ta, tb })
    }

    // ------------------------------------------------------------------
    // elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, op)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    // ------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), out, rg, Op::Reshape(x))
    }

    fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        (
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        )
    }

    /// Slice `[start, start+count)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || count == 0 || start + count > shape[axis] {
            return Err(dim_err!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + count
            ));
        }
        let (outer, len, inner) = Self::axis_view(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&src[base..base + count * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = count;
        let rg = self.rg(&[x]);
        self.push(
            new_shape,
            out,
            rg,
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat along {axis}: {s:?} vs {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Self::axis_view(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        let parts = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        self.push(shape, out, rg, Op::Concat { parts, outer, inner })
    }

    /// Flattens `[G, C, h, w]` into tokens `[G*h*w, C]` in (g, row, col) order.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("nchw_to_tokens expects rank 4, got {s:?}"));
        }
        let (g, c, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x);
        let mut out = vec![T::zero(); g * plane * c];
        for gi in 0..g {
            for ci in 0..c {
                for p in 0..plane {
                    out[(gi * plane + p) * c + ci] = src[(gi * c + ci) * plane + p];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![g * plane, c], out, rg, Op::NchwToTokens { x, g, c, plane })
    }

    // ------------------------------------------------------------------
    // network layers

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = Self::axis_view(&shape, axis);
        let out = kernels::softmax_forward(self.value(x), outer, len, inner);
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Softmax { x, outer, len, inner })
    }

    /// NCHW convolution with zero padding; `k` is `[O, C, kh, kw]` with odd
    /// spatial extents.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(dim_err!("conv2d expects rank-4 input and kernel, got {sx:?} and {sk:?}"));
        }
        if sx[1] != sk[1] {
            return Err(dim_err!("conv2d channels: input {sx:?} vs kernel {sk:?}"));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(dim_err!("conv2d kernel extents must be odd, got {sk:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            h: sx[2],
            w: sx[3],
            out_c: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(dim_err!("conv2d kernel {sk:?} larger than padded input {sx:?}"));
        }
        if (geom.h + 2 * pad - geom.kh) % stride != 0 || (geom.w + 2 * pad - geom.kw) % stride != 0 {
            return Err(dim_err!(
                "conv2d stride {stride} does not divide padded input {sx:?} minus kernel {sk:?}"
            ));
        }
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(k));
        let rg = self.rg(&[x, k]);
        self.push(
            vec![geom.batch, geom.out_c, geom.out_h(), geom.out_w()],
            out,
            rg,
            Op::Conv2d { x, k, geom },
        )
    }

    /// Adds a per-channel bias `b[C]` to `x[B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || numel(&sb) != sx[1] {
            return Err(dim_err!("channel bias {sb:?} does not match {sx:?}"));
        }
        let plane: usize = sx[2..].iter().product();
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = bias[i % sx[1]];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(&[x, b]);
        self.push(sx, out, rg, Op::ChannelBias { x, b })
    }

    /// Adds `b[n]` to each row of `x[m, n]`.
    pub fn row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || numel(&sb) != sx[1] {
            return Err(dim_err!("row bias {sb:?} does not match {sx:?}"));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(sx[1]) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
        }
        let rg = self.rg(&[x, b]);
        self.push(sx, out, rg, Op::RowBias { x, b })
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// In training mode the batch statistics are used (retrieve them with
    /// [`Tape::batch_stats`] to update running averages); otherwise the
    /// supplied running mean and variance are.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        training: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err!("batch_norm expects NCHW, got {sx:?}"));
        }
        let (b, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.value(gamma).len() != c || self.value(beta).len() != c || running.0.len() != c || running.1.len() != c {
            return Err(dim_err!("batch_norm parameters do not have {c} channels"));
        }
        if training && b * plane < 2 {
            return Err(Error::Contract(format!(
                "degenerate batch for batch norm: {} values per channel",
                b * plane
            )));
        }
        let eps = T::of(BN_EPS);
        let (mean, var) = if training {
            kernels::channel_stats(self.value(x), b, c, plane)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        for (i, (o, chunk)) in out.chunks_mut(plane).zip(xv.chunks(plane)).enumerate() {
            let ch = i % c;
            let (m, s, g, bb) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            o.iter_mut().zip(chunk).for_each(|(o, &v)| *o = g * (v - m) * s + bb);
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            sx,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                training,
            },
        )
    }

    /// Bilinear resize of the two trailing axes (align-corners = false).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || h == 0 || w == 0 {
            return Err(dim_err!("resize of {s:?} to {h}x{w}"));
        }
        let n = s.len();
        let from = (s[n - 2], s[n - 1]);
        let planes = numel(&s[..n - 2]);
        let out = kernels::resize_forward(self.value(x), planes, from, (h, w));
        let mut shape = s;
        shape[n - 2] = h;
        shape[n - 1] = w;
        let rg = self.rg(&[x]);
        self.push(
            shape,
            out,
            rg,
            Op::Resize {
                x,
                planes,
                from,
                to: (h, w),
            },
        )
    }

    /// Spatial mean: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("global_avg_pool expects NCHW, got {s:?}"));
        }
        let plane = s[2] * s[3];
        let inv = T::of(1.0 / plane as f64);
        let out = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(vec![s[0], s[1]], out, rg, Op::GlobalAvgPool { x, plane })
    }

    /// 2×2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(dim_err!("avg_pool2 needs NCHW with even spatial extents, got {s:?}"));
        }
        let planes = s[0] * s[1];
        let out = kernels::avg_pool2_forward(self.value(x), planes, s[2], s[3]);
        let rg = self.rg(&[x]);
        self.push(
            vec![s[0], s[1], s[2] / 2, s[3] / 2],
            out,
            rg,
            Op::AvgPool2 {
                x,
                planes,
                h: s[2],
                w: s[3],
            },
        )
    }

    /// Boundary-weighted BCE plus weighted IoU, averaged over the batch.
    ///
    /// `weights` must be the per-pixel weight map for `gt`
    /// (see [`crate::training::boundary_weights`]).
    pub fn ppa_loss(&mut self, logits: Var, gt: &[T], weights: Vec<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 || s[1] != 1 || gt.len() != numel(&s) || weights.len() != gt.len() {
            return Err(dim_err!("ppa_loss: logits {s:?} vs {} gt values", gt.len()));
        }
        let batch = s[0];
        let plane = s[2] * s[3];
        let x = self.value(logits);
        let mut total = T::zero();
        for b in 0..batch {
            let r = b * plane..(b + 1) * plane;
            total += ppa_terms(&x[r.clone()], &gt[r.clone()], &weights[r]).0;
        }
        let loss = total / T::of(batch as f64);
        let rg = self.rg(&[logits]);
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::PpaLoss {
                logits,
                gt: gt.to_vec(),
                weights,
                batch,
            },
        )
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Propagates `d loss / d v` to every differentiable leaf reachable from
    /// `loss`, adding into the leaf gradients of earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.strict && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} is not finite",
                    op_name(&self.nodes[i].op)
                )));
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = if ta { sa[0] } else { sa[1] };
                if rg(a) {
                    // dA (as stored) = g * B^T, or (g * B^T)^T when A was transposed
                    let mut da = vec![T::zero(); sa[0] * sa[1]];
                    let bv = &self.nodes[b.0].value;
                    // op(B) is [k, n]; we need g[m,n] * op(B)^T[n,k]
                    let (rsb, csb) = if tb { (k as isize, 1) } else { (1, n as isize) };
                    let (rsc, csc) = if ta { (1, m as isize) } else { (k as isize, 1) };
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, rsb, csb, T::zero(), &mut da, rsc, csc);
                    send(a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); sb[0] * sb[1]];
                    let av = &self.nodes[a.0].value;
                    // op(A)^T[k,m] * g[m,n]
                    let (rsa, csa) = if ta { (m as isize, 1) } else { (1, k as isize) };
                    let (rsc, csc) = if tb { (1, k as isize) } else { (n as isize, 1) };
                    T::gemm(k, m, n, T::one(), av, rsa, csa, g, n as isize, 1, T::zero(), &mut db, rsc, csc);
                    send(b, db);
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if rg(a) {
                    send(a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if rg(b) {
                    send(b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            &Op::Scale(x, s) => send(x, g.iter().map(|&v| v * s).collect()),
            &Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                send(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                send(x, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            &Op::Softmax { x, outer, len, inner } => {
                send(x, kernels::softmax_backward(&node.value, g, outer, len, inner));
            }
            &Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    &geom,
                    &self.nodes[x.0].value,
                    &self.nodes[k.0].value,
                    g,
                    rg(x),
                    rg(k),
                );
                if let Some(dx) = dx {
                    send(x, dx);
                }
                if let Some(dk) = dk {
                    send(k, dk);
                }
            }
            &Op::ChannelBias { x, b } => {
                send(x, g.to_vec());
                if rg(b) {
                    let c = node.shape[1];
                    let plane: usize = node.shape[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    send(b, db);
                }
            }
            &Op::RowBias { x, b } => {
                send(x, g.to_vec());
                if rg(b) {
                    let n = node.shape[1];
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    send(b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
                ..
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = node.shape[1];
                let plane = node.shape[2] * node.shape[3];
                let count = T::of((node.shape[0] * plane) as f64);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gc, xc)) in g.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                    let ch = i % c;
                    for (&gi, &xi) in gc.iter().zip(xc) {
                        sum_g[ch] += gi;
                        sum_gx[ch] += gi * (xi - mean[ch]) * inv_std[ch];
                    }
                }
                if rg(x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for (i, ((dc, gc), xc)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(xv.chunks(plane)).enumerate() {
                        let ch = i % c;
                        let s = inv_std[ch];
                        let scale = gv[ch] * s;
                        for ((d, &gi), &xi) in dc.iter_mut().zip(gc).zip(xc) {
                            *d = if *training {
                                let xhat = (xi - mean[ch]) * s;
                                scale * (gi - sum_g[ch] / count - xhat * sum_gx[ch] / count)
                            } else {
                                scale * gi
                            };
                        }
                    }
                    send(x, dx);
                }
                if rg(gamma) {
                    send(gamma, sum_gx);
                }
                if rg(beta) {
                    send(beta, sum_g);
                }
            }
            &Op::Resize { x, planes, from, to } => {
                send(x, kernels::resize_backward(g, planes, from, to));
            }
            &Op::GlobalAvgPool { x, plane } => {
                let inv = T::of(1.0 / plane as f64);
                send(x, g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect());
            }
            &Op::AvgPool2 { x, planes, h, w } => {
                send(x, kernels::avg_pool2_backward(g, planes, h, w));
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::NchwToTokens { x, g: groups, c, plane } => {
                let mut dx = vec![T::zero(); g.len()];
                for gi in 0..groups {
                    for ci in 0..c {
                        for p in 0..plane {
                            dx[(gi * c + ci) * plane + p] = g[(gi * plane + p) * c + ci];
                        }
                    }
                }
                send(x, dx);
            }
            &Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            } => {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    dx[base..base + count * inner].copy_from_slice(&g[o * count * inner..(o + 1) * count * inner]);
                }
                send(x, dx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(p, dp);
                    }
                    offset += len;
                }
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                send(x, vec![g[0]; n]);
            }
            Op::PpaLoss {
                logits,
                gt,
                weights,
                batch,
            } => {
                let xv = &self.nodes[logits.0].value;
                let plane = xv.len() / batch;
                let scale = g[0] / T::of(*batch as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for b in 0..*batch {
                    let r = b * plane..(b + 1) * plane;
                    let d = ppa_terms_grad(&xv[r.clone()], &gt[r.clone()], &weights[r]);
                    dx.extend(d.into_iter().map(|v| v * scale));
                }
                send(*logits, dx);
            }
        }
    }
}

/// Batch norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax { .. } => "softmax",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelBias { .. } => "channel_bias",
        Op::RowBias { .. } => "row_bias",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Resize { .. } => "resize",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::Reshape(_) => "reshape",
        Op::NchwToTokens { .. } => "nchw_to_tokens",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::Sum(_) => "sum",
        Op::PpaLoss { .. } => "ppa_loss",
    }
}

/// Returns `(wbce + wiou, wbce, wiou)` for one image.
fn ppa_terms<T: Scalar>(x: &[T], g: &[T], w: &[T]) -> (T, T, T) {
    let (mut wsum, mut wbce, mut inter, mut union) = (T::zero(), T::zero(), T::zero(), T::zero());
    for ((&x, &g), &w) in x.iter().zip(g).zip(w) {
        let p = kernels::sigmoid(x);
        wsum += w;
        wbce += w * (kernels::softplus(x) - g * x);
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    let bce = wbce / wsum;
    let iou = T::one() - (inter + T::one()) / (union + T::one());
    (bce + iou, bce, iou)
}

fn ppa_terms_grad<T: Scalar>(x: &[T], g: &[T], w: &[T]) -> Vec<T> {
    let (mut wsum, mut inter, mut union) = (T::zero(), T::one(), T::one());
    for ((&x, &g), &w) in x.iter().zip(g).zip(w) {
        let p = kernels::sigmoid(x);
        wsum += w;
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    x.iter()
        .zip(g)
        .zip(w)
        .map(|((&x, &g), &w)| {
            let p = kernels::sigmoid(x);
            let d_bce = w * (p - g) / wsum;
            // d/dp of -(I/U) = -(w g U - I w (1 - g)) / U^2
            let d_iou_dp = -(w * g * union - inter * w * (T::one() - g)) / (union * union);
            d_bce + d_iou_dp * p * (T::one() - p)
        })
        .collect()
}

/// Public per-image PPA loss breakdown `(total, wbce, wiou)`.
pub fn ppa_breakdown<T: Scalar>(logits: &[T], gt: &[T], weights: &[T]) -> (T, T, T) {
    ppa_terms(logits, gt, weights)
}

/// Central-difference gradient check.
///
/// `f` builds a scalar on a fresh tape from a leaf holding the point. The
/// analytic gradient comes from [`Tape::backward`]; the numeric one from
/// `(f(θ+ε) − f(θ−ε)) / 2ε` per coordinate. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut p = point.clone();
    p.set_requires_grad(true);
    let x = tape.leaf(&p);
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.input(point.shape().to_vec(), data, true);
        let out = f(&mut t, x)?;
        Ok(t.item(out))
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
