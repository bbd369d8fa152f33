use std::cell::RefCell;
use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::{numel, split_axis, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

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
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    AddChannel {
        x: Var,
        b: Var,
        outer: usize,
        c: usize,
        inner: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        c: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GroupMean {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        na: usize,
        nb: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records differentiable operations in execution order.
///
/// Every op appends one node whose inputs are strictly earlier nodes, so the
/// node list is already a topological order and [`Tape::backward`] is a single
/// reverse sweep. Nodes that do not depend on any gradient-requiring leaf are
/// stored as constants.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(
            op,
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    Ok(())
}

/// Validates that `perm` is a bijection on `0..n`.
pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Permutation(format!(
            "length {} for an axis of extent {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Permutation(format!("{perm:?} is not a bijection on 0..{n}")));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Value-identical copy of `x` that is detached from the tape.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let v = self.value(x);
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, &[x], Op::Reshape(x)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, &[x], Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x).map(|e| e + s);
        self.push(v, &[x], Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&self, x: Var) -> Var {
        let v = self.value(x).map(T::exp);
        self.push(v, &[x], Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        let v = self.value(x).map(T::ln);
        self.push(v, &[x], Op::Log(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, &[x], Op::Relu(x))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("sum_axis", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (acc, &e) in dst.iter_mut().zip(src) {
                    *acc += e;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::SumAxis { x, outer, n, inner },
        ))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Row-wise inner product of two `[.., d]` tensors.
    pub fn dot_last(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        let r = self.shape(p).len();
        self.sum_axis(p, r - 1)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, n, k, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::Matmul { a, b, m, k, n },
        ))
    }

    fn softmax_values(d: &[T], outer: usize, n: usize, inner: usize, log: bool) -> Vec<T> {
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..n).map(|j| (d[at(j)] - mx).exp()).sum();
                let lz = z.ln();
                for j in 0..n {
                    out[at(j)] = if log {
                        d[at(j)] - mx - lz
                    } else {
                        (d[at(j)] - mx).exp() / z
                    };
                }
            }
        }
        out
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let out = Self::softmax_values(xv.data(), outer, n, inner, false);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x],
            Op::Softmax { x, outer, n, inner },
        ))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("log_softmax", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let out = Self::softmax_values(xv.data(), outer, n, inner, true);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x],
            Op::LogSoftmax { x, outer, n, inner },
        ))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        check_axis("l2_normalize", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let eps = T::of(eps);
        let d = xv.data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let sq: T = (0..n).map(|j| d[at(j)] * d[at(j)]).sum();
                let nr = sq.sqrt().max(eps);
                norms[o * inner + i] = nr;
                for j in 0..n {
                    out[at(j)] = d[at(j)] / nr;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x],
            Op::L2Normalize {
                x,
                outer,
                n,
                inner,
                norms,
            },
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: Var, index: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let xv = self.value(x);
        if numel(&shape) != index.len() {
            return Err(shape_err(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i >= d.len() {
                return Err(shape_err("gather", format!("index {i} >= {}", d.len())));
            }
            out.push(d[i]);
        }
        Ok(self.push(Tensor::new(shape, out)?, &[x], Op::Gather { x, index }))
    }

    /// Reorders the entries along `axis`: `out[.., j, ..] = x[.., perm[j], ..]`.
    pub fn index_permute(&self, x: Var, axis: usize, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        check_axis("index_permute", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        check_permutation(perm, n)?;
        let mut index = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for &p in perm {
                for i in 0..inner {
                    index.push((o * n + p) * inner + i);
                }
            }
        }
        self.gather(x, Arc::new(index), shape)
    }

    /// Generalized transpose: output axis `i` is input axis `axes[i]`.
    pub fn permute_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        check_permutation(axes, shape.len())?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut pos = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(pos.iter().zip(axes).map(|(&p, &a)| p * strides[a]).sum());
            for d in (0..pos.len()).rev() {
                pos[d] += 1;
                if pos[d] < out_shape[d] {
                    break;
                }
                pos[d] = 0;
            }
        }
        self.gather(x, Arc::new(index), out_shape)
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        let out = conv2d_forward(&geom, xv.data(), wv.data());
        Ok(self.push(
            Tensor::from_parts(geom.output_shape(), out),
            &[x, w],
            Op::Conv2d { x, w, geom },
        ))
    }

    /// Mean pooling over non-overlapping `k x k` windows of the last two axes.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || k == 0 {
            return Err(shape_err("avg_pool2d", format!("shape {s:?}, window {k}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % k != 0 || w % k != 0 {
            return Err(shape_err(
                "avg_pool2d",
                format!("extent {h}x{w} not divisible by {k}"),
            ));
        }
        let planes = xv.numel() / (h * w);
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let d = xv.data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xcol in 0..w {
                    out[(p * oh + y / k) * ow + xcol / k] += d[(p * h + y) * w + xcol];
                }
            }
        }
        out.iter_mut().for_each(|e| *e *= inv);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::AvgPool2d { x, k, planes, h, w },
        ))
    }

    /// Mean over the last two (spatial) axes.
    pub fn spatial_mean(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err("spatial_mean", format!("shape {s:?}")));
        }
        let r = s.len();
        let mut flat = s[..r - 2].to_vec();
        flat.push(s[r - 2] * s[r - 1]);
        let f = self.reshape(x, flat)?;
        self.mean_axis(f, r - 2)
    }

    /// Adds `b[c]` along `axis` (broadcast over all other axes).
    pub fn add_channel(&self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check_axis("add_channel", xv.shape(), axis)?;
        let (outer, c, inner) = split_axis(xv.shape(), axis);
        if bv.numel() != c {
            return Err(shape_err(
                "add_channel",
                format!("bias of {} for axis extent {c}", bv.numel()),
            ));
        }
        let (d, bd) = (xv.data(), bv.data());
        let out = (0..d.len())
            .map(|i| d[i] + bd[(i / inner) % c])
            .collect();
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x, b],
            Op::AddChannel {
                x,
                b,
                outer,
                c,
                inner,
            },
        ))
    }

    /// Normalizes with per-`axis` statistics pooled over every other axis,
    /// then applies the affine map `gamma[c] * xhat + beta[c]`.
    /// Returns the output and the batch mean/biased variance per channel.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check_axis("batch_norm", xv.shape(), axis)?;
        let (outer, c, inner) = split_axis(xv.shape(), axis);
        if gv.numel() != c || bv.numel() != c {
            return Err(shape_err(
                "batch_norm",
                format!("affine params of {}/{} for {c} channels", gv.numel(), bv.numel()),
            ));
        }
        let count = T::of((outer * inner) as f64);
        let d = xv.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, m) in mean.iter_mut().enumerate() {
                for &e in &d[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    *m += e;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for ch in 0..c {
                for &e in &d[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    let t = e - mean[ch];
                    var[ch] += t * t;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        for i in 0..d.len() {
            let ch = (i / inner) % c;
            xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
            out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
        }
        let y = self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                c,
                inner,
                xhat,
                inv_std,
            },
        );
        Ok((y, mean, var))
    }

    /// Replaces every slice along `axis` by the mean of all slices.
    ///
    /// Each mean is accumulated over the values sorted ascending, so the result
    /// is bit-identical under any permutation of the slices.
    pub fn group_mean(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("group_mean", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut buf = Vec::with_capacity(n);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..n).map(|j| d[(o * n + j) * inner + i]));
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let m = buf.iter().fold(T::zero(), |acc, &e| acc + e) * inv;
                for j in 0..n {
                    out[(o * n + j) * inner + i] = m;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[x],
            Op::GroupMean { x, outer, n, inner },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_axis("concat", av.shape(), axis)?;
        let (sa, sb) = (av.shape(), bv.shape());
        let compatible = sa.len() == sb.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?} on axis {axis}")));
        }
        let (outer, ea, inner) = split_axis(sa, axis);
        let eb = sb[axis];
        let (na, nb) = (ea * inner, eb * inner);
        let mut out = Vec::with_capacity(outer * (na + nb));
        for o in 0..outer {
            out.extend_from_slice(&av.data()[o * na..(o + 1) * na]);
            out.extend_from_slice(&bv.data()[o * nb..(o + 1) * nb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = ea + eb;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[a, b],
            Op::Concat {
                a,
                b,
                outer,
                na,
                nb,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[B, L]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} for {} labels", lv.shape(), labels.len()),
            ));
        }
        let (b, l) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(shape_err(
                "cross_entropy",
                format!("label {bad} >= {l} classes"),
            ));
        }
        let logp = Self::softmax_values(lv.data(), b, l, 1, true);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logp[i * l + y])
            .sum::<T>()
            / T::of(b as f64);
        let probs = logp.iter().map(|&e| e.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must hold one element, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &dy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf) && n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    contribution: impl FnOnce() -> Vec<T>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(c).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(c),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    dy: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => accumulate(nodes, grads, *x, || dy.to_vec()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || dy.to_vec());
            accumulate(nodes, grads, *b, || dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || dy.to_vec());
            accumulate(nodes, grads, *b, || dy.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, || {
                dy.iter().zip(val(*b)).map(|(&g, &e)| g * e).collect()
            });
            accumulate(nodes, grads, *b, || {
                dy.iter().zip(val(*a)).map(|(&g, &e)| g * e).collect()
            });
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, || dy.iter().map(|&g| g * *s).collect()),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, || dy.to_vec()),
        Op::Exp(x) => accumulate(nodes, grads, *x, || {
            dy.iter().zip(y).map(|(&g, &e)| g * e).collect()
        }),
        Op::Log(x) => accumulate(nodes, grads, *x, || {
            dy.iter().zip(val(*x)).map(|(&g, &e)| g / e).collect()
        }),
        Op::Relu(x) => accumulate(nodes, grads, *x, || {
            dy.iter()
                .zip(val(*x))
                .map(|(&g, &e)| if e > T::zero() { g } else { T::zero() })
                .collect()
        }),
        Op::Sum(x) => accumulate(nodes, grads, *x, || vec![dy[0]; val(*x).len()]),
        Op::SumAxis { x, outer, n, inner } => accumulate(nodes, grads, *x, || {
            let mut g = vec![T::zero(); outer * n * inner];
            for o in 0..*outer {
                for j in 0..*n {
                    g[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                }
            }
            g
        }),
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accumulate(nodes, grads, *a, || {
                let mut g = vec![T::zero(); m * k];
                T::gemm(false, true, m, k, n, T::one(), dy, val(*b), T::zero(), &mut g);
                g
            });
            accumulate(nodes, grads, *b, || {
                let mut g = vec![T::zero(); k * n];
                T::gemm(true, false, k, n, m, T::one(), val(*a), dy, T::zero(), &mut g);
                g
            });
        }
        Op::Softmax { x, outer, n, inner } => accumulate(nodes, grads, *x, || {
            let mut g = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..*n).map(|j| dy[at(j)] * y[at(j)]).sum();
                    for j in 0..*n {
                        g[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                    }
                }
            }
            g
        }),
        Op::LogSoftmax { x, outer, n, inner } => accumulate(nodes, grads, *x, || {
            let mut g = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let total: T = (0..*n).map(|j| dy[at(j)]).sum();
                    for j in 0..*n {
                        g[at(j)] = dy[at(j)] - y[at(j)].exp() * total;
                    }
                }
            }
            g
        }),
        Op::L2Normalize {
            x,
            outer,
            n,
            inner,
            norms,
        } => accumulate(nodes, grads, *x, || {
            let xd = val(*x);
            let mut g = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let nr = norms[o * inner + i];
                    let raw: T = (0..*n).map(|j| xd[at(j)] * xd[at(j)]).sum::<T>().sqrt();
                    if raw < nr {
                        // clamped branch: y = x / eps
                        for j in 0..*n {
                            g[at(j)] = dy[at(j)] / nr;
                        }
                    } else {
                        let dot: T = (0..*n).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..*n {
                            g[at(j)] = (dy[at(j)] - y[at(j)] * dot) / nr;
                        }
                    }
                }
            }
            g
        }),
        Op::Gather { x, index } => accumulate(nodes, grads, *x, || {
            let mut g = vec![T::zero(); val(*x).len()];
            for (&i, &d) in index.iter().zip(dy) {
                g[i] += d;
            }
            g
        }),
        Op::Conv2d { x, w, geom } => {
            let need_dx = nodes[x.0].requires_grad;
            let need_dw = nodes[w.0].requires_grad;
            let (dx, dw) = conv2d_backward(geom, val(*x), val(*w), dy, need_dx, need_dw);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, || dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, || dw);
            }
        }
        Op::AvgPool2d { x, k, planes, h, w } => accumulate(nodes, grads, *x, || {
            let (oh, ow) = (h / k, w / k);
            let inv = T::one() / T::of((k * k) as f64);
            let mut g = vec![T::zero(); planes * h * w];
            for p in 0..*planes {
                for yy in 0..*h {
                    for xx in 0..*w {
                        g[(p * h + yy) * w + xx] = dy[(p * oh + yy / k) * ow + xx / k] * inv;
                    }
                }
            }
            g
        }),
        Op::AddChannel {
            x,
            b,
            outer,
            c,
            inner,
        } => {
            accumulate(nodes, grads, *x, || dy.to_vec());
            accumulate(nodes, grads, *b, || {
                let mut g = vec![T::zero(); *c];
                for o in 0..*outer {
                    for (ch, gc) in g.iter_mut().enumerate() {
                        for &d in &dy[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                            *gc += d;
                        }
                    }
                }
                g
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            outer,
            c,
            inner,
            xhat,
            inv_std,
        } => {
            let (outer, c, inner) = (*outer, *c, *inner);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for i in 0..dy.len() {
                let ch = (i / inner) % c;
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * xhat[i];
            }
            let gam = val(*gamma);
            accumulate(nodes, grads, *x, || {
                let count = T::of((outer * inner) as f64);
                (0..dy.len())
                    .map(|i| {
                        let ch = (i / inner) % c;
                        gam[ch] * inv_std[ch] / count
                            * (count * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                    })
                    .collect()
            });
            accumulate(nodes, grads, *gamma, || sum_dy_xhat.clone());
            accumulate(nodes, grads, *beta, || sum_dy.clone());
        }
        Op::GroupMean { x, outer, n, inner } => accumulate(nodes, grads, *x, || {
            let inv = T::one() / T::of(*n as f64);
            let mut g = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let total: T = (0..*n).map(|j| dy[(o * n + j) * inner + i]).sum();
                    for j in 0..*n {
                        g[(o * n + j) * inner + i] = total * inv;
                    }
                }
            }
            g
        }),
        Op::Concat {
            a,
            b,
            outer,
            na,
            nb,
        } => {
            let (outer, na, nb) = (*outer, *na, *nb);
            accumulate(nodes, grads, *a, || {
                (0..outer)
                    .flat_map(|o| dy[o * (na + nb)..o * (na + nb) + na].iter().copied())
                    .collect()
            });
            accumulate(nodes, grads, *b, || {
                (0..outer)
                    .flat_map(|o| dy[o * (na + nb) + na..(o + 1) * (na + nb)].iter().copied())
                    .collect()
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => accumulate(nodes, grads, *logits, || {
            let b = labels.len();
            let l = probs.len() / b;
            let scale = dy[0] / T::of(b as f64);
            let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                g[i * l + y] -= scale;
            }
            g
        }),
    }
}
