//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every differentiable operation records one node holding the handles of its
//! tracked inputs and a closure computing the local vector-Jacobian product.
//! Because parents are always recorded before children, append order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Lifetime convention: one tape per training step, dropped after the
//! optimizer update. Inference reuses the same forward code with
//! [`Tape::inert`], which computes values but records nothing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::tensor::{axpy, check_finite, dot_slices, NodeRef, Scalar, Shape, Tensor, TensorError};

/// Receives the gradient flowing into a node's output and returns one
/// gradient buffer per tracked parent, in parent order.
type BackFn<F> = Box<dyn Fn(&[F]) -> SmallVec<[Vec<F>; 2]>>;

struct Node<F> {
    shape: Shape,
    parents: SmallVec<[usize; 2]>,
    back: Option<BackFn<F>>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    recording: bool,
    /// Test hook for the gradient checker's self-validation: when set, `tanh`
    /// records a deliberately wrong local derivative of 1. A checker that
    /// still reports small error with this enabled is not checking anything.
    pub(crate) tanh_grad_one: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Recording tape for one training or gradient-checking step.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            tanh_grad_one: false,
        }
    }

    /// Non-recording tape: operations compute values only, so inference runs
    /// through the identical forward code without gradient bookkeeping.
    pub fn inert() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t`'s current value as a differentiable leaf. Gradients
    /// accumulate on the returned handle; any prior tape association of `t`
    /// is ignored.
    pub fn watch(&mut self, t: &Tensor<F>) -> Tensor<F> {
        if !self.recording {
            return t.detached();
        }
        let shape = Shape::from_slice(t.shape());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            parents: SmallVec::new(),
            back: None,
        });
        Tensor::from_parts(shape, t.data_arc(), Some(NodeRef { tape: self.id, id }))
    }

    /// Node id of `t` when it is tracked on this tape; `None` for constants.
    /// Inputs recorded on a *different* tape are an error: their history is
    /// invisible here and silently treating them as constants would produce
    /// wrong gradients.
    fn tracked(&self, t: &Tensor<F>, op: &'static str) -> Result<Option<usize>, TensorError> {
        if !self.recording {
            return Ok(None);
        }
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.id)),
            Some(_) => Err(TensorError::TapeMismatch { op }),
        }
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Shape,
        data: Vec<F>,
        parents: SmallVec<[usize; 2]>,
        back: BackFn<F>,
    ) -> Result<Tensor<F>, TensorError> {
        check_finite(op, &data)?;
        let data: Arc<[F]> = data.into();
        if !self.recording || parents.is_empty() {
            return Ok(Tensor::from_parts(shape, data, None));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            parents,
            back: Some(back),
        });
        Ok(Tensor::from_parts(
            shape,
            data,
            Some(NodeRef { tape: self.id, id }),
        ))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: &Tensor<F>,
        b: &Tensor<F>,
    ) -> Result<(), TensorError> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.tracked(a, "add")?, self.tracked(b, "add")?);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(tb).collect();
        let (na, nb) = (ta.is_some(), tb.is_some());
        self.push(
            "add",
            Shape::from_slice(a.shape()),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    out.push(g.to_vec());
                }
                if nb {
                    out.push(g.to_vec());
                }
                out
            }),
        )
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.tracked(a, "sub")?, self.tracked(b, "sub")?);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(tb).collect();
        let (na, nb) = (ta.is_some(), tb.is_some());
        self.push(
            "sub",
            Shape::from_slice(a.shape()),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    out.push(g.to_vec());
                }
                if nb {
                    out.push(g.iter().map(|&v| -v).collect());
                }
                out
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.tracked(a, "mul")?, self.tracked(b, "mul")?);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(tb).collect();
        let (na, nb) = (ta.is_some(), tb.is_some());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.push(
            "mul",
            Shape::from_slice(a.shape()),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    out.push(g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if nb {
                    out.push(g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect());
                }
                out
            }),
        )
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: &Tensor<F>, k: F) -> Result<Tensor<F>, TensorError> {
        let ta = self.tracked(a, "scale")?;
        let data = a.data().iter().map(|&x| x * k).collect();
        self.push(
            "scale",
            Shape::from_slice(a.shape()),
            data,
            ta.into_iter().collect(),
            Box::new(move |g| {
                let mut out = SmallVec::new();
                out.push(g.iter().map(|&v| v * k).collect());
                out
            }),
        )
    }

    /// Broadcast multiply of `a` by a scalar-valued tensor `s` (shape `[1]`),
    /// differentiable in both operands.
    pub fn scale_by(&mut self, a: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if !s.is_scalar() {
            return Err(TensorError::BadShape {
                op: "scale_by",
                expected: "scalar tensor of shape [1]".into(),
                shape: s.shape().to_vec(),
            });
        }
        let (ta, ts) = (self.tracked(a, "scale_by")?, self.tracked(s, "scale_by")?);
        let sv = s.data()[0];
        let data = a.data().iter().map(|&x| x * sv).collect();
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(ts).collect();
        let (na, ns) = (ta.is_some(), ts.is_some());
        let ad = a.data_arc();
        self.push(
            "scale_by",
            Shape::from_slice(a.shape()),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    out.push(g.iter().map(|&v| v * sv).collect());
                }
                if ns {
                    out.push(vec![dot_slices(g, &ad)]);
                }
                out
            }),
        )
    }

    /// Sum of any number of same-shaped tensors in one node.
    pub fn add_n(&mut self, terms: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        let first = terms.first().ok_or(TensorError::EmptyInput { op: "add_n" })?;
        let mut data = first.data().to_vec();
        let mut parents = SmallVec::new();
        let mut tracked_count = vec![false; terms.len()];
        for (i, t) in terms.iter().enumerate() {
            self.same_shape("add_n", first, t)?;
            if let Some(id) = self.tracked(t, "add_n")? {
                parents.push(id);
                tracked_count[i] = true;
            }
            if i > 0 {
                for (acc, &v) in data.iter_mut().zip(t.data()) {
                    *acc = *acc + v;
                }
            }
        }
        let n_tracked = tracked_count.iter().filter(|&&b| b).count();
        self.push(
            "add_n",
            Shape::from_slice(first.shape()),
            data,
            parents,
            Box::new(move |g| (0..n_tracked).map(|_| g.to_vec()).collect()),
        )
    }

    /// Hyperbolic tangent, elementwise.
    pub fn tanh(&mut self, a: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let ta = self.tracked(a, "tanh")?;
        let data: Vec<F> = a.data().iter().map(|&x| x.tanh()).collect();
        let y: Arc<[F]> = data.clone().into();
        // Captured at record time so the whole graph built under the hook is
        // consistently wrong, which is what the checker self-test needs.
        let wrong_derivative = self.tanh_grad_one;
        self.push(
            "tanh",
            Shape::from_slice(a.shape()),
            data,
            ta.into_iter().collect(),
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if wrong_derivative {
                    out.push(g.to_vec());
                } else {
                    out.push(
                        g.iter()
                            .zip(y.iter())
                            .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                            .collect(),
                    );
                }
                out
            }),
        )
    }

    /// Logistic sigmoid, elementwise, computed branch-symmetrically so large
    /// negative inputs do not overflow `exp`.
    pub fn sigmoid(&mut self, a: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let ta = self.tracked(a, "sigmoid")?;
        let data: Vec<F> = a
            .data()
            .iter()
            .map(|&x| {
                if x >= F::zero() {
                    F::one() / (F::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            })
            .collect();
        let y: Arc<[F]> = data.clone().into();
        self.push(
            "sigmoid",
            Shape::from_slice(a.shape()),
            data,
            ta.into_iter().collect(),
            Box::new(move |g| {
                let mut out = SmallVec::new();
                out.push(
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                        .collect(),
                );
                out
            }),
        )
    }

    /// Softmax over a rank-1 tensor, with max-subtraction for stability.
    pub fn softmax(&mut self, a: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if a.rank() != 1 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "rank-1 vector".into(),
                shape: a.shape().to_vec(),
            });
        }
        let ta = self.tracked(a, "softmax")?;
        let max = a
            .data()
            .iter()
            .cloned()
            .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
        let mut data: Vec<F> = a.data().iter().map(|&x| (x - max).exp()).collect();
        let total = data.iter().fold(F::zero(), |s, &v| s + v);
        for v in &mut data {
            *v = *v / total;
        }
        let y: Arc<[F]> = data.clone().into();
        self.push(
            "softmax",
            Shape::from_slice(a.shape()),
            data,
            ta.into_iter().collect(),
            Box::new(move |g| {
                let s = dot_slices(g, &y);
                let mut out = SmallVec::new();
                out.push(
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| yv * (gv - s))
                        .collect(),
                );
                out
            }),
        )
    }

    /// Sum of all entries, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let ta = self.tracked(a, "sum")?;
        let total = a.data().iter().fold(F::zero(), |s, &v| s + v);
        let n = a.numel();
        self.push(
            "sum",
            Shape::from_slice(&[1]),
            vec![total],
            ta.into_iter().collect(),
            Box::new(move |g| {
                let mut out = SmallVec::new();
                out.push(vec![g[0]; n]);
                out
            }),
        )
    }

    /// Inner product of two equal-length vectors, as a shape-`[1]` tensor.
    pub fn dot(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if a.rank() != 1 || a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ta, tb) = (self.tracked(a, "dot")?, self.tracked(b, "dot")?);
        let value = dot_slices(a.data(), b.data());
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(tb).collect();
        let (na, nb) = (ta.is_some(), tb.is_some());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.push(
            "dot",
            Shape::from_slice(&[1]),
            vec![value],
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    out.push(bd.iter().map(|&v| v * g[0]).collect());
                }
                if nb {
                    out.push(ad.iter().map(|&v| v * g[0]).collect());
                }
                out
            }),
        )
    }

    /// Matrix-vector product `w[m×n] · x[n] -> [m]`.
    pub fn matvec(&mut self, w: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (m, n) = w.dims2().ok_or_else(|| TensorError::BadShape {
            op: "matvec",
            expected: "rank-2 matrix".into(),
            shape: w.shape().to_vec(),
        })?;
        if x.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: w.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let (tw, tx) = (self.tracked(w, "matvec")?, self.tracked(x, "matvec")?);
        let wd = w.data_arc();
        let xd = x.data_arc();
        let data: Vec<F> = (0..m)
            .map(|i| dot_slices(&wd[i * n..(i + 1) * n], &xd))
            .collect();
        let parents: SmallVec<[usize; 2]> = tw.into_iter().chain(tx).collect();
        let (nw, nx) = (tw.is_some(), tx.is_some());
        self.push(
            "matvec",
            Shape::from_slice(&[m]),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if nw {
                    // dW = g ⊗ x (outer product), row-major.
                    let mut dw = vec![F::zero(); m * n];
                    for i in 0..m {
                        axpy(g[i], &xd, &mut dw[i * n..(i + 1) * n]);
                    }
                    out.push(dw);
                }
                if nx {
                    let mut dx = vec![F::zero(); n];
                    for i in 0..m {
                        axpy(g[i], &wd[i * n..(i + 1) * n], &mut dx);
                    }
                    out.push(dx);
                }
                out
            }),
        )
    }

    /// Matrix product `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (m, k) = a.dims2().ok_or_else(|| TensorError::BadShape {
            op: "matmul",
            expected: "rank-2 matrix".into(),
            shape: a.shape().to_vec(),
        })?;
        let (kb, n) = b.dims2().ok_or_else(|| TensorError::BadShape {
            op: "matmul",
            expected: "rank-2 matrix".into(),
            shape: b.shape().to_vec(),
        })?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ta, tb) = (self.tracked(a, "matmul")?, self.tracked(b, "matmul")?);
        let ad = a.data_arc();
        let bd = b.data_arc();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut data[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                axpy(av, &bd[kk * n..(kk + 1) * n], orow);
            }
        }
        let parents: SmallVec<[usize; 2]> = ta.into_iter().chain(tb).collect();
        let (na, nb) = (ta.is_some(), tb.is_some());
        self.push(
            "matmul",
            Shape::from_slice(&[m, n]),
            data,
            parents,
            Box::new(move |g| {
                let mut out = SmallVec::new();
                if na {
                    // dA = g · Bᵀ: rows of g against rows of B are both contiguous.
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] = dot_slices(grow, &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                    out.push(da);
                }
                if nb {
                    // dB = Aᵀ · g, accumulated row-wise for cache friendliness.
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            axpy(ad[i * k + kk], grow, &mut db[kk * n..(kk + 1) * n]);
                        }
                    }
                    out.push(db);
                }
                out
            }),
        )
    }

    /// Contiguous subrange `a[start..start+len]` of a rank-1 tensor.
    pub fn slice(
        &mut self,
        a: &Tensor<F>,
        start: usize,
        len: usize,
    ) -> Result<Tensor<F>, TensorError> {
        if a.rank() != 1 || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice",
                expected: "rank-1 vector and non-empty range".into(),
                shape: a.shape().to_vec(),
            });
        }
        let n = a.numel();
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent: n,
            });
        }
        let ta = self.tracked(a, "slice")?;
        let data = a.data()[start..start + len].to_vec();
        self.push(
            "slice",
            Shape::from_slice(&[len]),
            data,
            ta.into_iter().collect(),
            Box::new(move |g| {
                let mut da = vec![F::zero(); n];
                da[start..start + len].copy_from_slice(g);
                let mut out = SmallVec::new();
                out.push(da);
                out
            }),
        )
    }

    /// Concatenation of rank-1 tensors into one vector.
    pub fn concat_n(&mut self, parts: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_n" });
        }
        let mut data = Vec::new();
        let mut parents = SmallVec::new();
        // (offset, len) of each tracked part within the concatenated output.
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for p in parts {
            if p.rank() != 1 {
                return Err(TensorError::BadShape {
                    op: "concat_n",
                    expected: "rank-1 vector".into(),
                    shape: p.shape().to_vec(),
                });
            }
            if let Some(id) = self.tracked(p, "concat_n")? {
                parents.push(id);
                spans.push((data.len(), p.numel()));
            }
            data.extend_from_slice(p.data());
        }
        let total = data.len();
        self.push(
            "concat_n",
            Shape::from_slice(&[total]),
            data,
            parents,
            Box::new(move |g| {
                spans
                    .iter()
                    .map(|&(off, len)| g[off..off + len].to_vec())
                    .collect()
            }),
        )
    }

    /// Stacks equal-length rank-1 tensors into a `[rows × len]` matrix.
    pub fn stack_rows(&mut self, rows: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        let first = rows
            .first()
            .ok_or(TensorError::EmptyInput { op: "stack_rows" })?;
        if first.rank() != 1 {
            return Err(TensorError::BadShape {
                op: "stack_rows",
                expected: "rank-1 vector".into(),
                shape: first.shape().to_vec(),
            });
        }
        let cols = first.numel();
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut parents = SmallVec::new();
        let mut tracked_rows: Vec<usize> = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            self.same_shape("stack_rows", first, r)?;
            if let Some(id) = self.tracked(r, "stack_rows")? {
                parents.push(id);
                tracked_rows.push(i);
            }
            data.extend_from_slice(r.data());
        }
        self.push(
            "stack_rows",
            Shape::from_slice(&[rows.len(), cols]),
            data,
            parents,
            Box::new(move |g| {
                tracked_rows
                    .iter()
                    .map(|&i| g[i * cols..(i + 1) * cols].to_vec())
                    .collect()
            }),
        )
    }

    /// Records a caller-defined differentiable operation. `data` is the
    /// already-computed forward value of shape `shape`; `back` receives the
    /// output gradient and must return one gradient buffer per entry of
    /// `inputs` (in order, sized like that input), including constants, whose
    /// buffers are discarded.
    pub fn record_op(
        &mut self,
        op: &'static str,
        inputs: &[&Tensor<F>],
        shape: &[usize],
        data: Vec<F>,
        back: impl Fn(&[F]) -> Vec<Vec<F>> + 'static,
    ) -> Result<Tensor<F>, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        let mut parents = SmallVec::new();
        let mut tracked_idx: Vec<usize> = Vec::new();
        for (i, t) in inputs.iter().enumerate() {
            if let Some(id) = self.tracked(t, op)? {
                parents.push(id);
                tracked_idx.push(i);
            }
        }
        let n_inputs = inputs.len();
        let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
        self.push(
            op,
            Shape::from_slice(shape),
            data,
            parents,
            Box::new(move |g| {
                let grads = back(g);
                assert_eq!(
                    grads.len(),
                    n_inputs,
                    "custom op backward must return one gradient per input"
                );
                tracked_idx
                    .iter()
                    .map(|&i| {
                        assert_eq!(grads[i].len(), sizes[i], "custom op gradient size mismatch");
                        grads[i].clone()
                    })
                    .collect()
            }),
        )
    }

    /// Reverse sweep from a scalar-valued root. Returns the accumulated
    /// gradient for every node; nodes the root does not depend on read as
    /// zero through [`Grads::get`].
    pub fn backward(&self, root: &Tensor<F>) -> Result<Grads<F>, TensorError> {
        let node = root.node.ok_or(TensorError::NotOnTape)?;
        if node.tape != self.id {
            return Err(TensorError::NotOnTape);
        }
        if !root.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut entries: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        entries[node.id] = Some(vec![F::one()]);
        for id in (0..=node.id).rev() {
            let Some(g) = entries[id].take() else {
                continue;
            };
            let rec = &self.nodes[id];
            if let Some(back) = &rec.back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), rec.parents.len());
                for (&p, contrib) in rec.parents.iter().zip(contribs) {
                    debug_assert!(p < id, "tape order violated: parent {p} >= child {id}");
                    match &mut entries[p] {
                        Some(acc) => {
                            for (a, &c) in acc.iter_mut().zip(&contrib) {
                                *a = *a + c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
            entries[id] = Some(g);
        }
        Ok(Grads {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            entries,
        })
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by tape handles.
pub struct Grads<F> {
    tape: u64,
    shapes: Vec<Shape>,
    entries: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the backward root with respect to `t`. Tensors the root
    /// does not depend on get a zero tensor of their recorded shape.
    pub fn get(&self, t: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let node = t.node.ok_or(TensorError::NotOnTape)?;
        if node.tape != self.tape {
            return Err(TensorError::NotOnTape);
        }
        match &self.entries[node.id] {
            Some(g) => Tensor::new(&self.shapes[node.id], g.clone()),
            None => Ok(Tensor::zeros(&self.shapes[node.id])),
        }
    }
}
