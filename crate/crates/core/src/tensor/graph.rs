use super::kernels;
use super::{numel, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `[outer, len, inner]` view of a tensor around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(shape_err!("axis {} out of range for {:?}", axis, shape));
        }
        Ok(AxisView {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        a: Var,
        scale: T,
    },
    Relu(Var),
    Gelu(Var),
    Ln(Var),
    Clamp {
        a: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        view: AxisView,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Slice {
        a: Var,
        view: AxisView,
        start: usize,
        count: usize,
    },
    Softmax {
        a: Var,
        view: AxisView,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        view: AxisView,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        rows_b: usize,
        dim: usize,
        norms: Vec<(T, T)>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Summary of one reverse pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose vector-Jacobian product was evaluated.
    pub visited: usize,
    /// Nodes in the graph.
    pub nodes: usize,
}

/// Append-only tape of tensor operations.
///
/// Nodes are created in evaluation order, so the node list itself is a
/// topological order and the reverse pass is a single backwards sweep.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s shape.
fn check_suffix(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_err!(
            "{}: shape {:?} does not broadcast against {:?}",
            what,
            b,
            a
        ));
    }
    Ok(())
}

/// Sum `g` (shaped like the broadcast output) down to `nb` trailing elements.
fn reduce_to<T: Scalar>(g: &[T], nb: usize) -> Vec<T> {
    if g.len() == nb {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); nb];
    for chunk in g.chunks(nb) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (shape `shape`) into the axis order `perm`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis as a tight loop
        let step = src_strides[last];
        for i in 0..out_shape[last] {
            out.push(src[offset + i * step]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", name)));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng, "leaf")
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Move a node's value (with gradient attached for trainable leaves) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `a[.., m, k] × b[.., k, n]`.
    ///
    /// `b` is either rank 2 (shared across every batch of `a`) or carries the
    /// same leading batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {:?} x {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?} ({} vs {})",
                sa,
                sb,
                k,
                kb
            ));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(shape_err!(
                "matmul batch dimensions differ: {:?} x {:?}",
                sa,
                sb
            ));
        }
        let batch: usize = batch_a.iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let data = if shared_b {
            kernels::matmul(ad, bd, batch * m, k, n)
        } else {
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                out.extend(kernels::matmul(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            out
        };
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(shape, data)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            ng,
            "matmul",
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_suffix(&sa, self.shape(b), name)?;
        let bd = self.value(b).data();
        let nb = bd.len();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(sa, data)?, op, ng, name)
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let v = self.value(a);
        let data = v.data().iter().map(|&x| s * x + t).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(out, Op::Affine { a, scale: s }, ng, "affine")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(out, op, ng, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(T::zero()), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "ln", |x| x.ln(), Op::Ln(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(a, "clamp", |x| x.max(lo).min(hi), Op::Clamp { a, lo, hi })
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(shape_err!("mean of empty tensor"));
        }
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::lit(v.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng, "mean")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let view = AxisView::of(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for l in 0..view.len {
                let base = (o * view.len + l) * view.inner;
                for i in 0..view.inner {
                    out[o * view.inner + i] = out[o * view.inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(a);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::SumAxis { a, view },
            ng,
            "sum_axis",
        )
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                v.shape(),
                shape
            ));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng, "reshape")
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err!("invalid permutation {:?} for {:?}", perm, shape));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(a);
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
            "permute",
        )
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(shape_err!("transpose axes ({}, {}) for rank {}", d0, d1, rank));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let view0 = AxisView::of(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", s, base));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let inner = view0.inner;
        let mut data = Vec::with_capacity(view0.outer * total * inner);
        for o in 0..view0.outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer: view0.outer,
                lens,
                inner,
            },
            ng,
            "concat",
        )
    }

    /// Elements `start..start + count` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let view = AxisView::of(&shape, axis)?;
        if start + count > view.len {
            return Err(shape_err!(
                "slice {}..{} out of range for axis {} of {:?}",
                start,
                start + count,
                axis,
                shape
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(view.outer * count * view.inner);
        for o in 0..view.outer {
            let from = (o * view.len + start) * view.inner;
            data.extend_from_slice(&src[from..from + count * view.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = count;
        let ng = self.ng(a);
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                a,
                view,
                start,
                count,
            },
            ng,
            "slice",
        )
    }

    // ---- normalization --------------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let view = AxisView::of(&shape, axis)?;
        let data = kernels::softmax(self.value(a).data(), view.outer, view.len, view.inner);
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, data)?,
            Op::Softmax { a, view },
            ng,
            "softmax",
        )
    }

    /// Layer normalization along `axis` with variance epsilon `1e-5`.
    /// `gain` and `bias` have shape `[extent of axis]`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let view = AxisView::of(&shape, axis)?;
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(v) != [view.len] {
                return Err(shape_err!(
                    "layernorm {} has shape {:?}, expected [{}]",
                    what,
                    self.shape(v),
                    view.len
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::lit(view.len as f64);
        let eps = T::lit(EPS);
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for i in 0..view.inner {
                let at = |l: usize| (o * view.len + l) * view.inner + i;
                let mut mean = T::zero();
                for l in 0..view.len {
                    mean = mean + src[at(l)];
                }
                mean = mean / n;
                let mut var = T::zero();
                for l in 0..view.len {
                    let d = src[at(l)] - mean;
                    var = var + d * d;
                }
                var = var / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * view.inner + i] = r;
                for l in 0..view.len {
                    let h = (src[at(l)] - mean) * r;
                    xhat[at(l)] = h;
                    out[at(l)] = h * g[l] + b[l];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                view,
                xhat,
                rstd,
            },
            ng,
            "layernorm",
        )
    }

    /// Row-wise guarded cosine similarity over the last axis.
    ///
    /// `a` is `[.., R, D]`; `b` is either `[R, D]` (shared across the leading
    /// dimensions of `a`) or the same shape as `a`. The result drops the last
    /// axis. Rows where either norm is below `eps` yield 0 and pass no gradient.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("cosine needs rank >= 2, got {:?} and {:?}", sa, sb));
        }
        check_suffix(&sa, &sb, "cosine")?;
        let dim = sa[sa.len() - 1];
        let rows_a = self.value(a).numel() / dim.max(1);
        let rows_b = self.value(b).numel() / dim.max(1);
        let eps = T::lit(eps);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(rows_a);
        let mut norms = Vec::with_capacity(rows_a);
        for r in 0..rows_a {
            let rb = r % rows_b;
            let (c, na, nb) = kernels::cosine(
                &ad[r * dim..(r + 1) * dim],
                &bd[rb * dim..(rb + 1) * dim],
                eps,
            );
            out.push(c);
            norms.push((na, nb));
        }
        let out_shape = sa[..sa.len() - 1].to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Cosine {
                a,
                b,
                rows_b,
                dim,
                norms,
                eps,
            },
            ng,
            "cosine",
        )
    }

    // ---- reverse pass ---------------------------------------------------

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate over every use of a node. Trainable leaves get
    /// their `grad` field populated; interior gradients remain available via
    /// [`Graph::grad`] until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.vjp(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                node.value.set_grad(g.clone())?;
            }
        }
        self.grads = grads;
        Ok(BackwardStats {
            visited,
            nodes: self.nodes.len(),
        })
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                if ng(a) {
                    let ga = if shared_b {
                        kernels::matmul_bt(g, bd, batch * m, n, k)
                    } else {
                        let mut ga = Vec::with_capacity(batch * m * k);
                        for i in 0..batch {
                            ga.extend(kernels::matmul_bt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                            ));
                        }
                        ga
                    };
                    Self::accumulate(grads, a, ga);
                }
                if ng(b) {
                    let gb = if shared_b {
                        kernels::matmul_at(ad, g, batch * m, k, n)
                    } else {
                        let mut gb = Vec::with_capacity(batch * k * n);
                        for i in 0..batch {
                            gb.extend(kernels::matmul_at(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                            ));
                        }
                        gb
                    };
                    Self::accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if ng(a) {
                    Self::accumulate(grads, a, g.to_vec());
                }
                if ng(b) {
                    let mut gb = reduce_to(g, val(b).len());
                    if neg {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    Self::accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                let nb = bd.len();
                if ng(a) {
                    let ga = g.iter().enumerate().map(|(i, &x)| x * bd[i % nb]).collect();
                    Self::accumulate(grads, a, ga);
                }
                if ng(b) {
                    let full: Vec<T> = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, b, reduce_to(&full, nb));
                }
            }
            &Op::Div(a, b) => {
                let bd = val(b);
                let nb = bd.len();
                if ng(a) {
                    let ga = g.iter().enumerate().map(|(i, &x)| x / bd[i % nb]).collect();
                    Self::accumulate(grads, a, ga);
                }
                if ng(b) {
                    // d(a/b)/db = -(a/b)/b
                    let full: Vec<T> = g
                        .iter()
                        .zip(out)
                        .enumerate()
                        .map(|(i, (&x, &q))| -x * q / bd[i % nb])
                        .collect();
                    Self::accumulate(grads, b, reduce_to(&full, nb));
                }
            }
            &Op::Affine { a, scale } => {
                Self::accumulate(grads, a, g.iter().map(|&x| x * scale).collect());
            }
            &Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                    .collect();
                Self::accumulate(grads, a, ga);
            }
            &Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&x, &y)| x * kernels::gelu_grad(y))
                    .collect();
                Self::accumulate(grads, a, ga);
            }
            &Op::Ln(a) => {
                let ga = g.iter().zip(val(a)).map(|(&x, &y)| x / y).collect();
                Self::accumulate(grads, a, ga);
            }
            &Op::Clamp { a, lo, hi } => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&x, &y)| if y >= lo && y <= hi { x } else { T::zero() })
                    .collect();
                Self::accumulate(grads, a, ga);
            }
            &Op::Sum(a) => {
                Self::accumulate(grads, a, vec![g[0]; val(a).len()]);
            }
            &Op::Mean(a) => {
                let n = val(a).len();
                Self::accumulate(grads, a, vec![g[0] / T::lit(n as f64); n]);
            }
            &Op::SumAxis { a, view } => {
                let mut ga = vec![T::zero(); view.outer * view.len * view.inner];
                for o in 0..view.outer {
                    for l in 0..view.len {
                        let base = (o * view.len + l) * view.inner;
                        ga[base..base + view.inner]
                            .copy_from_slice(&g[o * view.inner..(o + 1) * view.inner]);
                    }
                }
                Self::accumulate(grads, a, ga);
            }
            &Op::Reshape(a) => {
                Self::accumulate(grads, a, g.to_vec());
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let ga = permute_data(g, node.value.shape(), &inv);
                Self::accumulate(grads, *a, ga);
            }
            Op::Concat {
                parts,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if ng(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[from..from + len * inner]);
                        }
                        Self::accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                a,
                view,
                start,
                count,
            } => {
                let mut ga = vec![T::zero(); view.outer * view.len * view.inner];
                for o in 0..view.outer {
                    let to = (o * view.len + start) * view.inner;
                    let from = o * count * view.inner;
                    ga[to..to + count * view.inner]
                        .copy_from_slice(&g[from..from + count * view.inner]);
                }
                Self::accumulate(grads, a, ga);
            }
            &Op::Softmax { a, view } => {
                let mut ga = vec![T::zero(); out.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let at = |l: usize| (o * view.len + l) * view.inner + i;
                        let mut dot = T::zero();
                        for l in 0..view.len {
                            dot = dot + g[at(l)] * out[at(l)];
                        }
                        for l in 0..view.len {
                            ga[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                Self::accumulate(grads, a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                view,
                xhat,
                rstd,
            } => {
                let gd = val(*gain);
                let n = T::lit(view.len as f64);
                if ng(*x) {
                    let mut gx = vec![T::zero(); out.len()];
                    for o in 0..view.outer {
                        for i in 0..view.inner {
                            let at = |l: usize| (o * view.len + l) * view.inner + i;
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for l in 0..view.len {
                                let d = g[at(l)] * gd[l];
                                mean_d = mean_d + d;
                                mean_dx = mean_dx + d * xhat[at(l)];
                            }
                            mean_d = mean_d / n;
                            mean_dx = mean_dx / n;
                            let r = rstd[o * view.inner + i];
                            for l in 0..view.len {
                                let d = g[at(l)] * gd[l];
                                gx[at(l)] = r * (d - mean_d - xhat[at(l)] * mean_dx);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx);
                }
                if ng(*gain) || ng(*bias) {
                    let mut gg = vec![T::zero(); view.len];
                    let mut gb = vec![T::zero(); view.len];
                    for o in 0..view.outer {
                        for l in 0..view.len {
                            for i in 0..view.inner {
                                let j = (o * view.len + l) * view.inner + i;
                                gg[l] = gg[l] + g[j] * xhat[j];
                                gb[l] = gb[l] + g[j];
                            }
                        }
                    }
                    if ng(*gain) {
                        Self::accumulate(grads, *gain, gg);
                    }
                    if ng(*bias) {
                        Self::accumulate(grads, *bias, gb);
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                rows_b,
                dim,
                norms,
                eps,
            } => {
                let (ad, bd) = (val(*a), val(*b));
                let dim = *dim;
                let mut ga = vec![T::zero(); ad.len()];
                let mut gb = vec![T::zero(); bd.len()];
                for (r, (&(na, nb), &c)) in norms.iter().zip(out).enumerate() {
                    if na < *eps || nb < *eps {
                        continue;
                    }
                    let rb = r % rows_b;
                    let gr = g[r];
                    let ar = &ad[r * dim..(r + 1) * dim];
                    let br = &bd[rb * dim..(rb + 1) * dim];
                    let inv = T::one() / (na * nb);
                    // dc/da = b/(|a||b|) - c a/|a|^2
                    for j in 0..dim {
                        ga[r * dim + j] = gr * (br[j] * inv - c * ar[j] / (na * na));
                        gb[rb * dim + j] =
                            gb[rb * dim + j] + gr * (ar[j] * inv - c * br[j] / (nb * nb));
                    }
                }
                if ng(*a) {
                    Self::accumulate(grads, *a, ga);
                }
                if ng(*b) {
                    Self::accumulate(grads, *b, gb);
                }
            }
        }
    }
}
