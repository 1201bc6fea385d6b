//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` walks it in
//! reverse exactly once.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately broken backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    AddRowBias(Var, Var),
    MulMask(Var, Vec<F>),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Mean {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Stack {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Slice {
        input: Var,
        outer: usize,
        len: usize,
        start: usize,
        count: usize,
        inner: usize,
    },
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    AffineFromTheta {
        theta: Var,
        pass: Vec<[bool; 2]>,
    },
    AffineGrid {
        affine: Var,
        out_h: usize,
        out_w: usize,
    },
    BilinearSample {
        input: Var,
        grid: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recorded computation. One graph is built per forward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    fault: Option<Fault>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; `None` if `v` does not require one.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
        Some(Tensor::new(shape, data).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, &[a], op)
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, &[a, b], op)
    }

    // ---------------------------------------------------------------------
    // Arithmetic

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.map_unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    /// Adds `bias: [K]` to every row of `x: [.., K]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let k = *self.shape(x).last().expect("rank >= 1");
        if self.shape(bias) != [k] {
            return Err(Error::dim(
                "add_row_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(x);
        let data = src
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, bias], Op::AddRowBias(x, bias)))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("mul_mask", "mask length differs from input"));
        }
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, &[x], Op::MulMask(x, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    // ---------------------------------------------------------------------
    // Convolution and pooling (channels-last)

    /// Cross-correlation of `input: [H,W,Cin]` or `[N,H,W,Cin]` with
    /// `kernel: [kH,kW,Cin,Cout]`, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let batched = si.len() == 4;
        let (n, h, w, cin) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => return Err(Error::dim("conv2d", format!("input shape {si:?}"))),
        };
        if sk.len() != 4 || sk[2] != cin {
            return Err(Error::dim("conv2d", format!("input {si:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::dim(
                "conv2d",
                format!("nonpositive output size for input {si:?}, kernel {sk:?}, pad {pad}"),
            ));
        }
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride,
            pad,
        };
        let patch = kh * kw * cin;
        let rows = n * oh * ow;
        let x = self.value(input).data();
        // A 1x1, stride-1, unpadded convolution is a plain matrix product.
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let cols = if pointwise { Vec::new() } else { im2col(x, &geom) };
        let mut out = vec![F::zero(); rows * cout];
        F::gemm(
            rows,
            patch,
            cout,
            if pointwise { x } else { &cols },
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let shape = if batched {
            vec![n, oh, ow, cout]
        } else {
            vec![oh, ow, cout]
        };
        let t = Tensor::new(shape, out)?;
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            t,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Max pooling over `size×size` windows with the given stride, no padding.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let batched = si.len() == 4;
        let (n, h, w, c) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => return Err(Error::dim("max_pool2d", format!("input shape {si:?}"))),
        };
        if size == 0 || stride == 0 || h < size || w < size {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {size} stride {stride} on {si:?}"),
            ));
        }
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = F::neg_infinity();
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = ((b * h + oy * stride + dy) * w + ox * stride + dx) * c + ch;
                                if x[idx] > best_v || best == usize::MAX {
                                    best_v = x[idx];
                                    best = idx;
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, &[input], Op::MaxPool { input, argmax }))
    }

    // ---------------------------------------------------------------------
    // Shape manipulation

    /// Arithmetic mean along `axis`; the axis is dropped (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(Error::dim(
                "mean",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let inv = F::one() / F::lit(len as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &[input],
            Op::Mean {
                input,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        Ok(self.push(t, &[input], Op::Reshape(input)))
    }

    /// Concatenate along an existing axis.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {first:?}")));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{first:?} with {s:?}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let x = self.value(v).data();
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                lens,
                inner,
            },
        ))
    }

    /// Stack equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::dim("stack", "no inputs"))?)
            .to_vec();
        if axis > first.len() {
            return Err(Error::dim("stack", format!("axis {axis} for {first:?}")));
        }
        for &v in inputs {
            if self.shape(v) != first.as_slice() {
                return Err(Error::dim("stack", format!("{first:?} with {:?}", self.shape(v))));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape.insert(axis, inputs.len());
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            inputs,
            Op::Stack {
                inputs: inputs.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// `count` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || count == 0 || start + count > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + count),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + start + count) * inner]);
        }
        let mut shape = s;
        shape[axis] = count;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &[input],
            Op::Slice {
                input,
                outer,
                len,
                start,
                count,
                inner,
            },
        ))
    }

    /// Entry `index` along `axis`, dropping the axis.
    pub fn select(&mut self, input: Var, axis: usize, index: usize) -> Result<Var> {
        let v = self.slice(input, axis, index, 1)?;
        let mut shape = self.shape(input).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(v, &shape)
    }

    // ---------------------------------------------------------------------
    // Normalization

    /// Per-channel normalization over every axis but the last. With
    /// `stats = None` the batch statistics are used (and returned); otherwise
    /// the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var, Vec<F>, Vec<F>)> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("{:?} with affine {:?}", self.shape(x), self.shape(gamma)),
            ));
        }
        let xs = self.value(x).data();
        let m = xs.len() / c;
        let (mean, var) = match stats {
            Some((mu, var)) => {
                if mu.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics width"));
                }
                (mu.to_vec(), var.to_vec())
            }
            None => {
                let mut mu = vec![F::zero(); c];
                for row in xs.chunks(c) {
                    for (a, &v) in mu.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let inv_m = F::one() / F::lit(m as f64);
                mu.iter_mut().for_each(|v| *v *= inv_m);
                let mut var = vec![F::zero(); c];
                for row in xs.chunks(c) {
                    for ((a, &v), &u) in var.iter_mut().zip(row).zip(&mu) {
                        *a += (v - u) * (v - u);
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_m);
                (mu, var)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            t,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
        );
        Ok((v, mean, var))
    }

    /// Rows of `x: [B,K]` scaled to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("l2_normalize_rows", format!("shape {s:?}")));
        }
        let k = s[1];
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(xs.len());
        for (r, row) in xs.chunks(k).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if !(n > F::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot normalize row {r}: norm is {n}"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, &[x], Op::L2NormalizeRows { x, norms }))
    }

    // ---------------------------------------------------------------------
    // Spatial transformer primitives

    /// `theta: [N,4]` rows `(s_x, s_y, τ_x, τ_y)` to `[N,2,3]` affine
    /// matrices `[[s_x,0,τ_x],[0,s_y,τ_y]]`. Scales may be clamped, in which
    /// case the clamped entries pass no gradient.
    pub fn affine_from_theta(&mut self, theta: Var, scale_clamp: Option<(F, F)>) -> Result<Var> {
        let s = self.shape(theta).to_vec();
        if s.len() != 2 || s[1] != 4 {
            return Err(Error::dim("affine_from_theta", format!("theta shape {s:?}")));
        }
        let th = self.value(theta).data();
        let mut out = Vec::with_capacity(s[0] * 6);
        let mut pass = Vec::with_capacity(s[0]);
        for row in th.chunks(4) {
            let clamp = |v: F| match scale_clamp {
                Some((lo, _)) if v < lo => (lo, false),
                Some((_, hi)) if v > hi => (hi, false),
                _ => (v, true),
            };
            let (sx, px) = clamp(row[0]);
            let (sy, py) = clamp(row[1]);
            pass.push([px, py]);
            out.extend_from_slice(&[sx, F::zero(), row[2], F::zero(), sy, row[3]]);
        }
        let t = Tensor::new(vec![s[0], 2, 3], out)?;
        Ok(self.push(t, &[theta], Op::AffineFromTheta { theta, pass }))
    }

    /// Sampling grid `[N,out_h,out_w,2]` of source `(x, y)` coordinates for
    /// affine matrices `[N,2,3]`, corner aligned in `[-1, 1]`.
    pub fn affine_grid(&mut self, affine: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(affine).to_vec();
        if s.len() != 3 || s[1] != 2 || s[2] != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "affine_grid",
                format!("affine {s:?} to {out_h}x{out_w}"),
            ));
        }
        let a = self.value(affine).data();
        let xs = normalized_coords::<F>(out_w);
        let ys = normalized_coords::<F>(out_h);
        let mut out = Vec::with_capacity(s[0] * out_h * out_w * 2);
        for m in a.chunks(6) {
            for &y in &ys {
                for &x in &xs {
                    out.push(m[0] * x + m[1] * y + m[2]);
                    out.push(m[3] * x + m[4] * y + m[5]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], out_h, out_w, 2], out)?;
        Ok(self.push(
            t,
            &[affine],
            Op::AffineGrid {
                affine,
                out_h,
                out_w,
            },
        ))
    }

    /// Bilinear interpolation of `input: [N,H,W,C]` at `grid: [N,oh,ow,2]`.
    /// Neighbours outside the map contribute zero.
    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sg = self.shape(grid).to_vec();
        if si.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != si[0] {
            return Err(Error::dim(
                "bilinear_sample",
                format!("input {si:?} with grid {sg:?}"),
            ));
        }
        let (n, h, w, c) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (sg[1], sg[2]);
        let x = self.value(input).data();
        let g = self.value(grid).data();
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite sampling grid".into()));
        }
        let mut out = vec![F::zero(); n * oh * ow * c];
        for b in 0..n {
            for p in 0..oh * ow {
                let gi = (b * oh * ow + p) * 2;
                let taps = bilinear_taps(g[gi], g[gi + 1], h, w);
                let dst = &mut out[(b * oh * ow + p) * c..(b * oh * ow + p + 1) * c];
                for (yy, xx, wt) in taps.into_iter().flatten() {
                    let src = &x[((b * h + yy) * w + xx) * c..((b * h + yy) * w + xx + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wt * v;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(t, &[input, grid], Op::BilinearSample { input, grid }))
    }

    // ---------------------------------------------------------------------
    // Losses

    /// Mean softmax cross-entropy of `logits: [B,K]` (or `[K]`) against labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (b, k) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::dim("softmax_xent", format!("logits {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_xent",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = F::zero();
        for (row, &label) in z.chunks(k).zip(labels) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: F = exps.iter().copied().sum();
            total += denom.ln() + max - row[label];
            probs.extend(exps.iter().map(|&e| e / denom));
        }
        let loss = total / F::lit(b as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = slot(adj, *a, m * k);
                    F::gemm(m, n, k, g, false, val(*b), true, da, true);
                }
                if needs(*b) {
                    let db = slot(adj, *b, k * n);
                    F::gemm(k, m, n, val(*a), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        accumulate(slot(adj, *v, g.len()), g.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(slot(adj, *a, g.len()), g.iter().copied());
                }
                if needs(*b) {
                    accumulate(slot(adj, *b, g.len()), g.iter().map(|&v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let y = val(*b);
                    accumulate(slot(adj, *a, g.len()), g.iter().zip(y).map(|(&d, &v)| d * v));
                }
                if needs(*b) {
                    let x = val(*a);
                    accumulate(slot(adj, *b, g.len()), g.iter().zip(x).map(|(&d, &v)| d * v));
                }
            }
            Op::Scale(a, s) => {
                accumulate(slot(adj, *a, g.len()), g.iter().map(|&d| d * *s));
            }
            Op::Sigmoid(a) => {
                let bias = if self.fault == Some(Fault::SigmoidBackward) {
                    F::lit(1.5)
                } else {
                    F::one()
                };
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter().zip(out).map(|(&d, &y)| d * y * (F::one() - y) * bias),
                );
            }
            Op::Tanh(a) => {
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter().zip(out).map(|(&d, &y)| d * (F::one() - y * y)),
                );
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() }),
                );
            }
            Op::AddRowBias(x, b) => {
                if needs(*x) {
                    accumulate(slot(adj, *x, g.len()), g.iter().copied());
                }
                if needs(*b) {
                    let k = nodes[b.0].value.numel();
                    let db = slot(adj, *b, k);
                    for row in g.chunks(k) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MulMask(x, mask) => {
                accumulate(
                    slot(adj, *x, g.len()),
                    g.iter().zip(mask).map(|(&d, &m)| d * m),
                );
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.numel();
                accumulate(slot(adj, *a, n), std::iter::repeat_n(g[0], n));
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let rows = geom.n * geom.oh * geom.ow;
                let patch = geom.kh * geom.kw * geom.cin;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                if needs(*kernel) {
                    let src = if pointwise { val(*input) } else { cols.as_slice() };
                    let dk = slot(adj, *kernel, patch * geom.cout);
                    F::gemm(patch, rows, geom.cout, src, true, g, false, dk, true);
                }
                if needs(*input) {
                    let n_in = geom.n * geom.h * geom.w * geom.cin;
                    if pointwise {
                        let dx = slot(adj, *input, n_in);
                        F::gemm(rows, geom.cout, patch, g, false, val(*kernel), true, dx, true);
                    } else {
                        let mut dcols = vec![F::zero(); rows * patch];
                        F::gemm(
                            rows,
                            geom.cout,
                            patch,
                            g,
                            false,
                            val(*kernel),
                            true,
                            &mut dcols,
                            false,
                        );
                        col2im_add(&dcols, geom, slot(adj, *input, n_in));
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = slot(adj, *input, nodes[input.0].value.numel());
                for (&d, &idx) in g.iter().zip(argmax) {
                    dx[idx] += d;
                }
            }
            Op::Mean {
                input,
                outer,
                len,
                inner,
            } => {
                let inv = F::one() / F::lit(*len as f64);
                let dx = slot(adj, *input, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v * inv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                accumulate(slot(adj, *a, g.len()), g.iter().copied());
            }
            Op::Concat {
                inputs,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if needs(v) {
                        let dx = slot(adj, v, outer * len * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in dx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Stack {
                inputs,
                outer,
                inner,
            } => {
                let n = inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if needs(v) {
                        let dx = slot(adj, v, outer * inner);
                        for o in 0..*outer {
                            let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &s) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Slice {
                input,
                outer,
                len,
                start,
                count,
                inner,
            } => {
                let dx = slot(adj, *input, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * count * inner..(o + 1) * count * inner];
                    let dst = &mut dx[(o * len + start) * inner..(o * len + start + count) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += row[j];
                        sum_gx[j] += row[j] * hrow[j];
                    }
                }
                if needs(*gamma) {
                    accumulate(slot(adj, *gamma, c), sum_gx.iter().copied());
                }
                if needs(*beta) {
                    accumulate(slot(adj, *beta, c), sum_g.iter().copied());
                }
                if needs(*x) {
                    let gm = val(*gamma);
                    let dx = slot(adj, *x, g.len());
                    let inv_m = F::one() / F::lit(m as f64);
                    for (r, (row, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            let scale = gm[j] * inv_std[j];
                            let d = if *batch_stats {
                                scale * (row[j] - inv_m * sum_g[j] - hrow[j] * inv_m * sum_gx[j])
                            } else {
                                scale * row[j]
                            };
                            dx[r * c + j] += d;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let k = g.len() / norms.len();
                let dx = slot(adj, *x, g.len());
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] += (gr[j] - y[j] * dot) / n;
                    }
                }
            }
            Op::AffineFromTheta { theta, pass } => {
                let dt = slot(adj, *theta, pass.len() * 4);
                for (r, p) in pass.iter().enumerate() {
                    let ga = &g[r * 6..(r + 1) * 6];
                    if p[0] {
                        dt[r * 4] += ga[0];
                    }
                    if p[1] {
                        dt[r * 4 + 1] += ga[4];
                    }
                    dt[r * 4 + 2] += ga[2];
                    dt[r * 4 + 3] += ga[5];
                }
            }
            Op::AffineGrid {
                affine,
                out_h,
                out_w,
            } => {
                let n = nodes[affine.0].value.shape()[0];
                let xs = normalized_coords::<F>(*out_w);
                let ys = normalized_coords::<F>(*out_h);
                let da = slot(adj, *affine, n * 6);
                for b in 0..n {
                    let mut acc = [F::zero(); 6];
                    for (i, &y) in ys.iter().enumerate() {
                        for (j, &x) in xs.iter().enumerate() {
                            let gi = ((b * out_h + i) * out_w + j) * 2;
                            let (gx, gy) = (g[gi], g[gi + 1]);
                            acc[0] += gx * x;
                            acc[1] += gx * y;
                            acc[2] += gx;
                            acc[3] += gy * x;
                            acc[4] += gy * y;
                            acc[5] += gy;
                        }
                    }
                    for (d, v) in da[b * 6..(b + 1) * 6].iter_mut().zip(acc) {
                        *d += v;
                    }
                }
            }
            Op::BilinearSample { input, grid } => {
                let si = nodes[input.0].value.shape();
                let sg = nodes[grid.0].value.shape();
                let (n, h, w, c) = (si[0], si[1], si[2], si[3]);
                let (oh, ow) = (sg[1], sg[2]);
                let x = val(*input);
                let gr = val(*grid);
                let want_x = needs(*input);
                let want_g = needs(*grid);
                let mut dgrid = if want_g { vec![F::zero(); gr.len()] } else { Vec::new() };
                let mut dinput = if want_x { vec![F::zero(); x.len()] } else { Vec::new() };
                let half_w = F::lit((w.max(1) - 1) as f64 / 2.0);
                let half_h = F::lit((h.max(1) - 1) as f64 / 2.0);
                for b in 0..n {
                    for p in 0..oh * ow {
                        let gi = (b * oh * ow + p) * 2;
                        let go = &g[(b * oh * ow + p) * c..(b * oh * ow + p + 1) * c];
                        let (px, py) = pixel_coords(gr[gi], gr[gi + 1], h, w);
                        let x0f = px.floor();
                        let y0f = py.floor();
                        let fx = px - x0f;
                        let fy = py - y0f;
                        let fetch = |yy: F, xx: F, ch: usize| -> F {
                            match in_bounds(yy, xx, h, w) {
                                Some((iy, ix)) => x[((b * h + iy) * w + ix) * c + ch],
                                None => F::zero(),
                            }
                        };
                        if want_g {
                            let one = F::one();
                            let mut dpx = F::zero();
                            let mut dpy = F::zero();
                            for (ch, &d) in go.iter().enumerate() {
                                let v00 = fetch(y0f, x0f, ch);
                                let v01 = fetch(y0f, x0f + one, ch);
                                let v10 = fetch(y0f + one, x0f, ch);
                                let v11 = fetch(y0f + one, x0f + one, ch);
                                dpx += d * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                                dpy += d * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                            }
                            dgrid[gi] += dpx * half_w;
                            dgrid[gi + 1] += dpy * half_h;
                        }
                        if want_x {
                            let taps = bilinear_taps(gr[gi], gr[gi + 1], h, w);
                            for (yy, xx, wt) in taps.into_iter().flatten() {
                                let base = ((b * h + yy) * w + xx) * c;
                                for (ch, &d) in go.iter().enumerate() {
                                    dinput[base + ch] += wt * d;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(slot(adj, *input, x.len()), dinput.into_iter());
                }
                if want_g {
                    accumulate(slot(adj, *grid, gr.len()), dgrid.into_iter());
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / F::lit(labels.len() as f64);
                let dz = slot(adj, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { F::one() } else { F::zero() };
                        dz[r * k + j] += (probs[r * k + j] - onehot) * scale;
                    }
                }
            }
        }
    }
}

fn slot<F: Real>(adj: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    adj[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn accumulate<F: Real>(dst: &mut [F], src: impl Iterator<Item = F>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Corner-aligned normalized coordinates for `n` samples; a single sample
/// sits at 0.
pub fn normalized_coords<F: Real>(n: usize) -> Vec<F> {
    if n == 1 {
        return vec![F::zero()];
    }
    (0..n)
        .map(|j| F::lit(-1.0 + 2.0 * j as f64 / (n - 1) as f64))
        .collect()
}

fn pixel_coords<F: Real>(x: F, y: F, h: usize, w: usize) -> (F, F) {
    let half = F::lit(0.5);
    let px = (x + F::one()) * half * F::lit((w - 1) as f64);
    let py = (y + F::one()) * half * F::lit((h - 1) as f64);
    (px, py)
}

fn in_bounds<F: Real>(y: F, x: F, h: usize, w: usize) -> Option<(usize, usize)> {
    if y < F::zero() || x < F::zero() {
        return None;
    }
    let (iy, ix) = (y.to_usize()?, x.to_usize()?);
    (iy < h && ix < w).then_some((iy, ix))
}

/// The four interpolation taps `(row, col, weight)` for a normalized source
/// point; out-of-bounds taps are `None`.
fn bilinear_taps<F: Real>(x: F, y: F, h: usize, w: usize) -> [Option<(usize, usize, F)>; 4] {
    let (px, py) = pixel_coords(x, y, h, w);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = F::one();
    let tap = |yy: F, xx: F, wt: F| in_bounds(yy, xx, h, w).map(|(iy, ix)| (iy, ix, wt));
    [
        tap(y0, x0, (one - fx) * (one - fy)),
        tap(y0, x0 + one, fx * (one - fy)),
        tap(y0 + one, x0, (one - fx) * fy),
        tap(y0 + one, x0 + one, fx * fy),
    ]
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let patch = g.kh * g.kw * g.cin;
    let mut cols = vec![F::zero(); g.n * g.oh * g.ow * patch];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Real>(dcols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let patch = g.kh * g.kw * g.cin;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&dcols[src..src + g.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
