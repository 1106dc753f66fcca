//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node to the [`Graph`]; node indices are the
//! topological order. [`Graph::backward`] walks the record once in reverse
//! and accumulates gradients additively into every node that requires them.
//! Leading axes are treated as batch axes wherever an operation works on
//! "rows" (softmax, layer norm, matmul against a weight matrix).

use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct TripletPick<T> {
    anchor: usize,
    positive: usize,
    negative: usize,
    d_ap: T,
    d_an: T,
    active: bool,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Repeat(Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    TripletHard {
        x: Var,
        picks: Vec<TripletPick<T>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) => {
                vec![*a, *b]
            }
            Op::Repeat(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Softmax(a) => vec![*a],
            Op::SumAxis { a, .. }
            | Op::Narrow { a, .. }
            | Op::Permute { a, .. }
            | Op::L2Normalize { a, .. } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::TripletHard { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record: values, local backward rules, and (after
/// [`Graph::backward`]) gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(ParamId, Var)>,
    fault: Option<Fault>,
}

/// Deliberate backward-pass bugs for exercising the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the left-operand gradient of `matmul` by 1.1.
    MatmulBackward,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the source for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn euclid<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same id
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of every discrete choice made so far: relu input signs and the
    /// positives, negatives and active hinges picked by hard mining. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &v in self.nodes[a.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::TripletHard { picks, .. } => {
                    i.hash(&mut h);
                    for p in picks {
                        (p.positive, p.negative, p.active).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.bound
            .iter()
            .filter_map(|&(id, v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("operation produced a consistent shape")
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut data,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Self::out(&shape, data), Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `a[B, m, k] x b[B, k, n]`, or `x b[B, n, k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut data = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            Self::out(&[batch, m, n], data),
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Self::out(ta.shape(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err("add_broadcast", &sa, &sb));
        }
        let bv = self.value(b).data();
        let w = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % w])
            .collect();
        Ok(self.push(Self::out(&sa, data), Op::AddBroadcast(a, b)))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(TensorError::Invalid {
                op: "repeat",
                msg: "repeat count must be positive".into(),
            });
        }
        let src = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        Ok(self.push(Self::out(&shape, data), Op::Repeat(a)))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| x * c).collect();
        let t = Self::out(src.shape(), data);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Self::out(src.shape(), data);
        self.push(t, Op::Relu(a))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / T::lit(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {sa:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        Ok(self.push(
            Self::out(&shape, data),
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, T::one() / T::lit(len as f64)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
            widths.push(numel(&s[axis..]));
        }
        let outer = numel(&first[..axis]);
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Self::out(&shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
        ))
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let axis = self.shape(inputs[0]).len().saturating_sub(1);
        self.concat(inputs, axis)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {sa:?}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(
            Self::out(&shape, data),
            Op::Narrow {
                a,
                outer,
                full: full * inner,
                start: start * inner,
                len: len * inner,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {sa:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(self.value(a).data(), &sa, perm, &out_shape);
        Ok(self.push(
            Self::out(&out_shape, data),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    // ---- normalizations ---------------------------------------------------

    /// Max-stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = *src.shape().last().ok_or(TensorError::Invalid {
            op: "softmax_rows",
            msg: "rank-0 input".into(),
        })?;
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = T::one() / total;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let t = Self::out(src.shape(), data);
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        Ok(self.push(
            Self::out(&sx, data),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Training-mode batch normalization of `x[B, d]` over the batch axis
    /// (biased variance). Also returns the batch mean and variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(shape_err("batch_norm", &sx, self.shape(gamma)));
        }
        let (b, d) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let bn = T::lit(b as f64);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for r in 0..b {
            for j in 0..d {
                mean[j] += src[r * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / bn);
        for r in 0..b {
            for j in 0..d {
                let c = src[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / bn);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = (0..b * d)
            .map(|i| (src[i] - mean[i % d]) * inv_std[i % d])
            .collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        let v = self.push(
            Self::out(&sx, data),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, mean, var))
    }

    /// Divides every vector along the last axis by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = *src.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut data = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(TensorError::Degenerate {
                    op: "l2_normalize",
                    msg: "zero-norm vector".into(),
                });
            }
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let t = Self::out(src.shape(), data);
        Ok(self.push(t, Op::L2Normalize { a, norms }))
    }

    /// Cosine similarity between matching vectors along the last axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let na = self.l2_normalize(a).map_err(|_| TensorError::Degenerate {
            op: "cosine_similarity",
            msg: "zero-norm vector".into(),
        })?;
        let nb = self.l2_normalize(b).map_err(|_| TensorError::Degenerate {
            op: "cosine_similarity",
            msg: "zero-norm vector".into(),
        })?;
        let p = self.mul(na, nb)?;
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    // ---- convolution ----------------------------------------------------

    /// Zero-padded cross-correlation of `x[B, H, W, Cin]` with
    /// `kernel[kh, kw, Cin, Cout]` and optional `bias[Cout]`.
    /// Output extent is `floor((H + 2 pad - kh) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return Err(shape_err("conv2d", &sx, &sk));
        }
        let (batch, in_h, in_w, in_c) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, out_c) = (sk[0], sk[1], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel extents must be odd and stride positive, got {kh}x{kw} stride {stride}"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return Err(shape_err("conv2d", &sk, self.shape(b)));
            }
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("padded input {in_h}x{in_w} (pad {pad}) smaller than kernel {kh}x{kw}"),
            });
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
            out_c,
            kh,
            kw,
            stride,
            pad,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let rows = batch * geom.out_h * geom.out_w;
        let patch = kh * kw * in_c;
        let mut data = vec![T::zero(); rows * out_c];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out_c) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            false,
            false,
            rows,
            patch,
            out_c,
            &cols,
            self.value(kernel).data(),
            T::one(),
            &mut data,
        );
        Ok(self.push(
            Self::out(&[batch, geom.out_h, geom.out_w, out_c], data),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {sl:?} against {} labels", labels.len()),
            });
        }
        let c = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut total = T::zero();
        for (row, &label) in src.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::lit(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-hard triplet loss on `x[B, d]`: per anchor the farthest
    /// same-label sample and the nearest different-label sample, hinge
    /// `[margin + d_ap - d_an]_+`, averaged over anchors.
    pub fn triplet_batch_hard(&mut self, x: Var, labels: &[usize], margin: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "triplet_batch_hard",
                msg: format!("features {sx:?} against {} labels", labels.len()),
            });
        }
        let (b, d) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut picks = Vec::with_capacity(b);
        let mut total = T::zero();
        for i in 0..b {
            let ai = &src[i * d..(i + 1) * d];
            let mut pos: Option<(usize, T)> = None;
            let mut neg: Option<(usize, T)> = None;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let dist = euclid(ai, &src[j * d..(j + 1) * d]);
                if labels[j] == labels[i] {
                    if pos.map_or(true, |(_, best)| dist > best) {
                        pos = Some((j, dist));
                    }
                } else if neg.map_or(true, |(_, best)| dist < best) {
                    neg = Some((j, dist));
                }
            }
            let (Some((p, d_ap)), Some((n, d_an))) = (pos, neg) else {
                return Err(TensorError::Sampling(format!(
                    "anchor {i} (label {}) lacks a positive or a negative",
                    labels[i]
                )));
            };
            let h = margin + d_ap - d_an;
            let active = h > T::zero();
            if active {
                total += h;
            }
            picks.push(TripletPick {
                anchor: i,
                positive: p,
                negative: n,
                d_ap,
                d_an,
                active,
            });
        }
        let loss = total / T::lit(b as f64);
        Ok(self.push(Tensor::scalar(loss), Op::TripletHard { x, picks }))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of every node reachable from `loss` that requires
    /// them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g, self.fault);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.kh * g.kw * g.in_c;
    let mut cols = vec![T::zero(); g.batch * g.out_h * g.out_w * patch];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let dst = (ky * g.kw + kx) * g.in_c;
                        row[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.kh * g.kw * g.in_c;
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let src = (ky * g.kw + kx) * g.in_c;
                        for (d, &s) in dx[dst..dst + g.in_c].iter_mut().zip(&row[src..src + g.in_c]) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T], fault: Option<Fault>) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, *a) {
                if fault == Some(Fault::MatmulBackward) {
                    let scaled: Vec<T> = g.iter().map(|&v| v * T::lit(1.1)).collect();
                    T::gemm(false, true, *m, *n, *k, &scaled, val(*b), T::one(), da);
                } else {
                    T::gemm(false, true, *m, *n, *k, g, val(*b), T::one(), da);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                T::gemm(true, false, *k, *m, *n, val(*a), g, T::one(), db);
            }
        }
        Op::BatchMatMul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(da) = slot(nodes, grads, *a) {
                let bv = val(*b);
                for t in 0..*batch {
                    T::gemm(
                        false,
                        !*trans_b,
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        T::one(),
                        &mut da[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let av = val(*a);
                for t in 0..*batch {
                    let gb = &g[t * m * n..(t + 1) * m * n];
                    let ab = &av[t * m * k..(t + 1) * m * k];
                    let out = &mut db[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        T::gemm(true, false, n, m, k, gb, ab, T::one(), out);
                    } else {
                        T::gemm(true, false, k, m, n, ab, gb, T::one(), out);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let bv = val(*b);
                for ((x, &y), &o) in d.iter_mut().zip(g).zip(bv) {
                    *x += y * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                let av = val(*a);
                for ((x, &y), &o) in d.iter_mut().zip(g).zip(av) {
                    *x += y * o;
                }
            }
        }
        Op::AddBroadcast(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                let w = d.len();
                for chunk in g.chunks(w) {
                    d.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Repeat(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let w = d.len();
                for chunk in g.chunks(w) {
                    d.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
            }
        }
        Op::Relu(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let out = node.value.data();
                for ((x, &y), &o) in d.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *x += y;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
        } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..*outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        d[base..base + inner]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
        Op::Concat {
            inputs,
            outer,
            widths,
        } => {
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (&v, &w) in inputs.iter().zip(widths) {
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        d[o * w..(o + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
                offset += w;
            }
        }
        Op::Narrow {
            a,
            outer,
            full,
            start,
            len,
        } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..*outer {
                    let dst = &mut d[o * full + start..o * full + start + len];
                    dst.iter_mut()
                        .zip(&g[o * len..(o + 1) * len])
                        .for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Permute { a, perm } => {
            if let Some(d) = slot(nodes, grads, *a) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse, nodes[a.0].value.shape());
                d.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Softmax(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>();
                    for ((x, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *x += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let dsz = nodes[gamma.0].value.len();
            if let Some(d) = slot(nodes, grads, *gamma) {
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    d[i % dsz] += gv * h;
                }
            }
            if let Some(d) = slot(nodes, grads, *beta) {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % dsz] += gv;
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let gm = val(*gamma);
                let dn = T::lit(dsz as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * dsz..(r + 1) * dsz];
                    let hr = &xhat[r * dsz..(r + 1) * dsz];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..dsz {
                        let dh = gr[j] * gm[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..dsz {
                        let dh = gr[j] * gm[j];
                        dx[r * dsz + j] += is / dn * (dn * dh - s1 - hr[j] * s2);
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
        } => {
            let dsz = inv_std.len();
            let b = xhat.len() / dsz;
            if let Some(d) = slot(nodes, grads, *gamma) {
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    d[i % dsz] += gv * h;
                }
            }
            if let Some(d) = slot(nodes, grads, *beta) {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % dsz] += gv;
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let gm = val(*gamma);
                let bn = T::lit(b as f64);
                for j in 0..dsz {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for r in 0..b {
                        let dh = g[r * dsz + j] * gm[j];
                        s1 += dh;
                        s2 += dh * xhat[r * dsz + j];
                    }
                    for r in 0..b {
                        let dh = g[r * dsz + j] * gm[j];
                        dx[r * dsz + j] += inv_std[j] / bn * (bn * dh - s1 - xhat[r * dsz + j] * s2);
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(d) = slot(nodes, grads, *a) {
                let y = node.value.data();
                let w = y.len() / norms.len();
                for (r, &nrm) in norms.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let dot = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..w {
                        d[r * w + j] += (gr[j] - yr[j] * dot) / nrm;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
            cols,
        } => {
            let rows = geom.batch * geom.out_h * geom.out_w;
            let patch = geom.kh * geom.kw * geom.in_c;
            if let Some(dk) = slot(nodes, grads, *kernel) {
                T::gemm(true, false, patch, rows, geom.out_c, cols, g, T::one(), dk);
            }
            if let Some(b) = bias {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks(geom.out_c) {
                        db.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![T::zero(); rows * patch];
                T::gemm(false, true, rows, geom.out_c, patch, g, val(*kernel), T::zero(), &mut dcols);
                if let Some(dx) = slot(nodes, grads, *x) {
                    col2im(&dcols, geom, dx);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(d) = slot(nodes, grads, *logits) {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { T::one() } else { T::zero() };
                        d[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::TripletHard { x, picks } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let src = val(*x);
                let dsz = src.len() / picks.len();
                let scale = g[0] / T::lit(picks.len() as f64);
                for p in picks.iter().filter(|p| p.active) {
                    // +d(a, pos) - d(a, neg)
                    for (other, dist, sign) in [(p.positive, p.d_ap, T::one()), (p.negative, p.d_an, -T::one())] {
                        if !(dist > T::zero()) {
                            continue;
                        }
                        let c = sign * scale / dist;
                        for j in 0..dsz {
                            let diff = src[p.anchor * dsz + j] - src[other * dsz + j];
                            dx[p.anchor * dsz + j] += c * diff;
                            dx[other * dsz + j] -= c * diff;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax_rows(z).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.constant(t(&[1, 3], &[0.0, 0.7, 1.4]));
        let b = g.constant(t(&[1, 3], &[5.0, 5.7, 6.4]));
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = g.softmax_rows(x).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in g.value(s).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_and_moments() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let c = g.constant(Tensor::full(&[1, 4], 2.5));
        let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[2, 4], &[1.0, -2.0, 0.5, 3.0, 10.0, 11.0, 9.0, 14.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_cases_and_zero_norm_error() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[0.3, -1.2, 2.0]));
        let c = g.cosine_similarity(u, u).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
        let e1 = g.constant(t(&[2], &[1.0, 0.0]));
        let e2 = g.constant(t(&[2], &[0.0, 1.0]));
        let c = g.cosine_similarity(e1, e2).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.cosine_similarity(z, e1),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn concat_preserves_order() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[4], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn backward_linear_quadratic_and_accumulation() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);

        // two uses of x: sum(x) + sum(3x) -> grad 4
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[0.2, 0.9]));
        let s1 = g.sum(x);
        let x3 = g.mul_scalar(x, 3.0);
        let s2 = g.sum(x3);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[k][i][j] == x[i][j][k]
        assert_eq!(g.value(p).data()[(3 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 3) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn narrow_and_sum_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let n = g.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let s = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c_and_rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 5]));
        let ce = g.cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-14);
        assert!(matches!(
            g.cross_entropy(l, &[0, 5]),
            Err(TensorError::LabelOutOfRange { label: 5, classes: 5 })
        ));
    }
}
