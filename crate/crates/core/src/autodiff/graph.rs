//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and records itself on the tape, so node
//! indices are already a topological order. `backward` walks the tape from the
//! end, accumulating vector-Jacobian products into the inputs of each node.

use crate::error::TensorError;
use crate::tensor::{axis_split, gemm, permute_data, MatView, Real, Tensor};

use super::kernels;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
    },
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    /// Forward-pass intermediates needed by the backward rule.
    saved: Vec<Vec<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Whether a backward pass releases the cached forward values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retain {
    Keep,
    Free,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    freed: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            freed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op,
        requires_grad: bool,
        saved: Vec<Vec<T>>,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node_value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        self.nodes[v.0].value.as_ref().ok_or(TensorError::GraphFreed)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("graph value freed")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// A differentiable leaf (weights, perturbations).
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push("param", t, Op::Leaf, true, Vec::new())
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push("constant", t, Op::Leaf, false, Vec::new())
    }

    /// `a[m,k] x b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            self.node_value(a)?.data(),
            MatView::row_major(m, k),
            self.node_value(b)?.data(),
            MatView::row_major(k, n),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            rg,
            Vec::new(),
        )
    }

    /// Batched `a[..,m,k] x b[..,k,n]` with identical leading extents.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 3 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let av = self.node_value(a)?.data();
        let bv = self.node_value(b)?.data();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                MatView::row_major(m, k),
                &bv[i * k * n..(i + 1) * k * n],
                MatView::row_major(k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.push(
            "batch_matmul",
            Tensor::new(shape, out)?,
            Op::BatchMatMul(a, b),
            rg,
            Vec::new(),
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.node_value(a)?.zip_map(self.node_value(b)?, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg, Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.node_value(a)?.zip_map(self.node_value(b)?, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg, Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.node_value(a)?.zip_map(self.node_value(b)?, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg, Vec::new())
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.node_value(b)?.data();
        let inner = bv.len();
        let mut out = self.node_value(a)?.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), rg, Vec::new())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let cs = T::lit(c);
        let out = self.node_value(a)?.map(|x| x * cs);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg, Vec::new())
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let x = self.node_value(a)?;
        let data = kernels::softmax(x.data(), x.shape(), axis, false);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("softmax", out, Op::Softmax(a, axis), rg, Vec::new())
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.node_value(a)?;
        let data = kernels::softmax(x.data(), x.shape(), axis, true);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("log_softmax", out, Op::LogSoftmax(a, axis), rg, Vec::new())
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.node_value(x)?.data(), d, T::lit(eps));
        let g = self.node_value(gamma)?.data();
        let b = self.node_value(beta)?.data();
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % d] + b[i % d]).collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::new(sx, out)?,
            Op::LayerNorm { x, gamma, beta },
            rg,
            vec![xhat, rstd],
        )
    }

    /// Group normalization of an `N x C x H x W` input with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || groups == 0 || sx[1] % groups != 0 {
            return Err(shape_err("group_norm", format!("{sx:?} with {groups} groups")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", format!("affine extents must be [{c}]")));
        }
        let hw = sx[2] * sx[3];
        let slab = (c / groups) * hw;
        let (xhat, rstd) = kernels::normalize_rows(self.node_value(x)?.data(), slab, T::lit(eps));
        let g = self.node_value(gamma)?.data();
        let b = self.node_value(beta)?.data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "group_norm",
            Tensor::new(sx, out)?,
            Op::GroupNorm { x, gamma, beta, groups },
            rg,
            vec![xhat, rstd],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.node_value(a)?.map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push("gelu", out, Op::Gelu(a), rg, Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.node_value(a)?.map(|v| v.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push("relu", out, Op::Relu(a), rg, Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.node_value(a)?.sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.node_value(a)?;
        let m = x.sum() / T::from_usize(x.len()).unwrap();
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), rg, Vec::new())
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("mean_axis", a, axis)?;
        let x = self.node_value(a)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let inv = T::one() / T::from_usize(len).unwrap();
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        self.push(
            "mean_axis",
            Tensor::new(shape, out)?,
            Op::MeanAxis(a, axis),
            rg,
            Vec::new(),
        )
    }

    /// 2-D convolution of `x[N,C,H,W]` with `w[O,C,KH,KW]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}, stride {stride}")));
        }
        let geo = kernels::ConvGeometry::new(&sx, &sw, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")))?;
        let out = kernels::conv2d_forward(self.node_value(x)?.data(), self.node_value(w)?.data(), &geo);
        let rg = self.rg(&[x, w]);
        self.push(
            "conv2d",
            Tensor::new(geo.out_shape(), out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.node_value(a)?.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg, Vec::new())
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let (data, out_shape) = permute_data(self.node_value(a)?.data(), &shape, perm);
        let rg = self.rg(&[a]);
        self.push(
            "permute",
            Tensor::new(out_shape, data)?,
            Op::Permute(a, perm.to_vec()),
            rg,
            Vec::new(),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            detail: "nothing to concatenate".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.node_value(p)?.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat(parts.to_vec(), axis),
            rg,
            Vec::new(),
        )
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("{start}..{} on extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.node_value(x)?.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            "narrow",
            Tensor::new(out_shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
            Vec::new(),
        )
    }

    /// Gathers rows of `table[V,D]`, producing `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("embedding", format!("table {s:?}, indices {indices:?}")));
        }
        let d = s[1];
        let t = self.node_value(table)?.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
            Vec::new(),
        )
    }

    /// Backpropagates from a scalar `loss` and releases the cached values.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.backward_seeded(loss, T::one(), Retain::Free)
    }

    /// Backpropagates from `loss` seeded with `seed`.
    pub fn backward_seeded(&mut self, loss: Var, seed: T, retain: Retain) -> Result<Gradients<T>, TensorError> {
        if self.freed {
            return Err(TensorError::GraphFreed);
        }
        if !self.shape(loss).is_empty() && self.shape(loss).iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarSeed(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), seed));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.shape.clone()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        if retain == Retain::Free {
            for node in &mut self.nodes {
                node.value = None;
                node.saved.clear();
            }
            self.freed = true;
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.node_value(*a)?, self.node_value(*b)?);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                gemm(
                    T::one(),
                    gd,
                    MatView::row_major(m, n),
                    bv.data(),
                    MatView::transposed(k, n),
                    T::zero(),
                    &mut ga,
                );
                gemm(
                    T::one(),
                    av.data(),
                    MatView::transposed(m, k),
                    gd,
                    MatView::row_major(m, n),
                    T::zero(),
                    &mut gb,
                );
                vec![(*a, Tensor::new(vec![m, k], ga)?), (*b, Tensor::new(vec![k, n], gb)?)]
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.node_value(*a)?, self.node_value(*b)?);
                let r = av.rank();
                let batch: usize = av.shape()[..r - 2].iter().product();
                let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                let mut ga = vec![T::zero(); batch * m * k];
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let asl = &av.data()[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
                    gemm(
                        T::one(),
                        gs,
                        MatView::row_major(m, n),
                        bsl,
                        MatView::transposed(k, n),
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                    gemm(
                        T::one(),
                        asl,
                        MatView::transposed(m, k),
                        gs,
                        MatView::row_major(m, n),
                        T::zero(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.node_value(*a)?, self.node_value(*b)?);
                vec![(*a, g.zip_map(bv, |x, y| x * y)?), (*b, g.zip_map(av, |x, y| x * y)?)]
            }
            Op::AddBroadcast(a, b) => {
                let bshape = self.shape(*b).to_vec();
                let inner: usize = bshape.iter().product();
                let mut gb = vec![T::zero(); inner];
                for chunk in gd.chunks(inner) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::new(bshape, gb)?)]
            }
            Op::Scale(a, c) => {
                let cs = T::lit(*c);
                vec![(*a, g.map(|v| v * cs))]
            }
            Op::Softmax(a, axis) => {
                let y = node.value.as_ref().ok_or(TensorError::GraphFreed)?;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.as_ref().ok_or(TensorError::GraphFreed)?;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gsum: T = (0..len).map(|l| gd[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = gd[at(l)] - yd[at(l)].exp() * gsum;
                        }
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let d = self.shape(*gamma)[0];
                let (xhat, rstd) = (&node.saved[0], &node.saved[1]);
                let gam = self.node_value(*gamma)?.data();
                let mut ggam = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gxhat = vec![T::zero(); gd.len()];
                for i in 0..gd.len() {
                    let c = i % d;
                    ggam[c] += gd[i] * xhat[i];
                    gbeta[c] += gd[i];
                    gxhat[i] = gd[i] * gam[c];
                }
                let gx = kernels::normalize_rows_backward(&gxhat, xhat, rstd, d);
                vec![
                    (*x, Tensor::new(self.shape(*x).to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![d], ggam)?),
                    (*beta, Tensor::new(vec![d], gbeta)?),
                ]
            }
            Op::GroupNorm {
                x, gamma, beta, groups, ..
            } => {
                let sx = self.shape(*x).to_vec();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let slab = (c / groups) * hw;
                let (xhat, rstd) = (&node.saved[0], &node.saved[1]);
                let gam = self.node_value(*gamma)?.data();
                let mut ggam = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); gd.len()];
                for i in 0..gd.len() {
                    let ch = (i / hw) % c;
                    ggam[ch] += gd[i] * xhat[i];
                    gbeta[ch] += gd[i];
                    gxhat[i] = gd[i] * gam[ch];
                }
                let gx = kernels::normalize_rows_backward(&gxhat, xhat, rstd, slab);
                vec![
                    (*x, Tensor::new(sx, gx)?),
                    (*gamma, Tensor::new(vec![c], ggam)?),
                    (*beta, Tensor::new(vec![c], gbeta)?),
                ]
            }
            Op::Gelu(a) => {
                let xv = self.node_value(*a)?;
                vec![(*a, g.zip_map(xv, |gv, x| gv * kernels::gelu_grad(x))?)]
            }
            Op::Relu(a) => {
                let xv = self.node_value(*a)?;
                vec![(*a, g.zip_map(xv, |gv, x| if x > T::zero() { gv } else { T::zero() })?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a).to_vec(), gd[0]))],
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let n = T::from_usize(s.iter().product()).unwrap();
                vec![(*a, Tensor::full(s, gd[0] / n))]
            }
            Op::MeanAxis(a, axis) => {
                let s = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                    }
                }
                vec![(*a, Tensor::new(s, gx)?)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (self.node_value(*x)?, self.node_value(*w)?);
                let geo =
                    kernels::ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad).expect("validated in forward");
                let (gx, gw) = kernels::conv2d_backward(xv.data(), wv.data(), gd, &geo);
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), gw)?),
                ]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.shape(*a).to_vec())?)],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (data, shape) = permute_data(gd, g.shape(), &inv);
                vec![(*a, Tensor::new(shape, data)?)]
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        gp.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                    }
                    offset += len;
                    res.push((p, Tensor::new(self.shape(p).to_vec(), gp)?));
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let (outer, full, inner) = axis_split(&s, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::new(s, gx)?)]
            }
            Op::Embedding { table, indices } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut gt = vec![T::zero(); s[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for (acc, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(&gd[row * d..(row + 1) * d]) {
                        *acc += v;
                    }
                }
                vec![(*table, Tensor::new(s, gt)?)]
            }
        };
        Ok(out)
    }
}
