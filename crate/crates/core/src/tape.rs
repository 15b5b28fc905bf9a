//! Reverse-mode differentiation over a recorded operation trace.
//!
//! Forward calls append one op per invocation to a linear trace and
//! evaluate eagerly through the kernels in [`crate::kernels`]; `backward`
//! walks the trace in reverse accumulating vector-Jacobian products.
//! Replaying the trace recomputes every node through the same kernels, so
//! replay reproduces forward values bit for bit. Everything is generic over
//! the element type: training runs the trace in `f32`, verification in
//! `f64`, with one shared code path.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels as kn;
use crate::mask::FlowMask;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node (buffer) on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

enum Op<T> {
    Linear { x: VarId, w: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    Matmul { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    MatmulNT { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId, out: VarId },
    Sub { a: VarId, b: VarId, out: VarId },
    Mul { a: VarId, b: VarId, out: VarId },
    Scale { x: VarId, c: T, out: VarId },
    RowScale { x: VarId, s: VarId, out: VarId, rows: usize, cols: usize },
    Modulate { x: VarId, scale: VarId, shift: VarId, out: VarId, rows: usize, cols: usize },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
        eps: T,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax { logits: VarId, out: VarId, rows: usize, cols: usize, mask: FlowMask },
    MaskedValueSum { probs: VarId, values: VarId, out: VarId, m: usize, n: usize, d: usize, mask: FlowMask },
    Sigmoid { x: VarId, out: VarId },
    Silu { x: VarId, out: VarId },
    Rotary {
        x: VarId,
        out: VarId,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
        tokens: usize,
        head_dim: usize,
    },
    SliceRows { x: VarId, out: VarId, start: usize, len: usize, cols: usize },
    ConcatRows { parts: Vec<VarId>, out: VarId, sizes: Vec<usize>, cols: usize },
    SliceCols { x: VarId, out: VarId, start: usize, len: usize, rows: usize, total_cols: usize },
    ConcatCols { parts: Vec<VarId>, out: VarId, sizes: Vec<usize>, rows: usize },
    Transpose { x: VarId, out: VarId, rows: usize, cols: usize },
    Reshape { x: VarId, out: VarId },
    Sum { x: VarId, out: VarId },
    MseConst { x: VarId, target: Arc<Vec<T>>, out: VarId },
}

/// Recorded trace, parameter registry and gradient accumulators.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, VarId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push_node(&mut self, data: Vec<T>, shape: Vec<usize>) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { data, shape });
        self.grads.push(None);
        id
    }

    /// Leaf node holding an input value.
    pub fn input(&mut self, t: &Tensor<T>) -> VarId {
        self.push_node(t.data().to_vec(), t.shape().to_vec())
    }

    /// Leaf node registered as a named parameter. The value is snapshotted.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> VarId {
        let id = self.input(t);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn params(&self) -> &[(String, VarId)] {
        &self.params
    }

    pub fn data(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: VarId) -> Tensor<T> {
        Tensor::from_vec_unchecked(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: VarId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient for a node, if backward has touched it.
    pub fn grad(&self, id: VarId) -> Option<Tensor<T>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_vec_unchecked(self.nodes[id.0].shape.clone(), g.clone()))
    }

    fn rows_cols(&self, id: VarId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => {
                let c = *shape.last().unwrap();
                (self.nodes[id.0].data.len() / c.max(1), c)
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── forward builders ────────────────────────────────────────────

    /// out = x @ w + b with x treated as [rows, d_in].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.rows_cols(x);
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 2 || wshape[0] != k {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: wshape,
            });
        }
        let n = wshape[1];
        if self.nodes[b.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: wshape,
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kn::linear(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            shape = vec![n];
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let id = self.push_node(out, shape);
        self.ops.push(Op::Linear { x, w, b, out: id, m, k, n });
        Ok(id)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kn::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let id = self.push_node(out, vec![m, n]);
        self.ops.push(Op::Matmul { a, b, out: id, m, k, n });
        Ok(id)
    }

    /// out[m,n] = a[m,k] @ b[n,k]^T
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kn::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let id = self.push_node(out, vec![m, n]);
        self.ops.push(Op::MatmulNT { a, b, out: id, m, k, n });
        Ok(id)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Sub { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Scale { x, c, out: id });
        id
    }

    /// out[t, :] = x[t, :] * s[t]
    pub fn row_scale(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[s.0].data.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let mut data = vec![T::ZERO; rows * cols];
        for t in 0..rows {
            let sv = self.nodes[s.0].data[t];
            for j in 0..cols {
                data[t * cols + j] = self.nodes[x.0].data[t * cols + j] * sv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::RowScale { x, s, out: id, rows, cols });
        Ok(id)
    }

    /// out = x * (1 + scale) + shift, with scale/shift broadcast over rows.
    pub fn modulate(&mut self, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[scale.0].data.len() != cols || self.nodes[shift.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "modulate",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[scale.0].shape.clone(),
            });
        }
        let mut data = vec![T::ZERO; rows * cols];
        for t in 0..rows {
            for j in 0..cols {
                data[t * cols + j] = self.nodes[x.0].data[t * cols + j]
                    * (T::ONE + self.nodes[scale.0].data[j])
                    + self.nodes[shift.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Modulate { x, scale, shift, out: id, rows, cols });
        Ok(id)
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> Result<VarId> {
        if eps <= T::ZERO {
            return Err(Error::invalid("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let (rows, cols) = self.rows_cols(x);
        if cols < 1 {
            return Err(Error::invalid("layer_norm", "last extent must be >= 1"));
        }
        if self.nodes[gamma.0].data.len() != cols || self.nodes[beta.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut mean = vec![T::ZERO; rows];
        let mut rstd = vec![T::ZERO; rows];
        kn::layer_norm_stats(&self.nodes[x.0].data, rows, cols, eps, &mut mean, &mut rstd);
        let mut out = vec![T::ZERO; rows * cols];
        kn::layer_norm_apply(
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            &mean,
            &rstd,
            &mut out,
            rows,
            cols,
        );
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(out, shape);
        self.ops.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            out: id,
            rows,
            cols,
            eps,
            mean,
            rstd,
        });
        Ok(id)
    }

    /// Row softmax restricted by the flow mask; blocked weights are exact 0.
    pub fn masked_softmax(&mut self, logits: VarId, mask: FlowMask) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(logits);
        if mask.len() != rows || mask.len() != cols {
            return Err(Error::invalid(
                "masked_softmax",
                format!("mask over {} tokens vs logits {}x{}", mask.len(), rows, cols),
            ));
        }
        let mut out = vec![T::ZERO; rows * cols];
        kn::softmax_rows(&self.nodes[logits.0].data, &mut out, rows, cols, |q, k| {
            mask.allowed(q, k)
        })?;
        let shape = self.nodes[logits.0].shape.clone();
        let id = self.push_node(out, shape);
        self.ops.push(Op::MaskedSoftmax { logits, out: id, rows, cols, mask });
        Ok(id)
    }

    /// out[m, :] = sum over allowed keys of probs[m, n] * values[n, :].
    /// Blocked entries are skipped entirely, so a blocked key's value never
    /// enters the sum (not even as a multiply by zero).
    pub fn masked_value_sum(&mut self, probs: VarId, values: VarId, mask: FlowMask) -> Result<VarId> {
        let (m, n) = self.rows_cols(probs);
        let (n2, d) = self.rows_cols(values);
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "masked_value_sum",
                lhs: self.nodes[probs.0].shape.clone(),
                rhs: self.nodes[values.0].shape.clone(),
            });
        }
        if mask.len() != m || mask.len() != n {
            return Err(Error::invalid(
                "masked_value_sum",
                format!("mask over {} tokens vs probs {}x{}", mask.len(), m, n),
            ));
        }
        let mut out = vec![T::ZERO; m * d];
        kn::weighted_value_sum(
            &self.nodes[probs.0].data,
            &self.nodes[values.0].data,
            &mut out,
            m,
            n,
            d,
            |q, k| mask.allowed(q, k),
        );
        let id = self.push_node(out, vec![m, d]);
        self.ops.push(Op::MaskedValueSum { probs, values, out: id, m, n, d, mask });
        Ok(id)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| kn::sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Sigmoid { x, out: id });
        id
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| kn::silu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Silu { x, out: id });
        id
    }

    /// Rotate channel pairs of x [tokens, head_dim] by precomputed tables
    /// [tokens, head_dim/2].
    pub fn rotary(&mut self, x: VarId, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<VarId> {
        let (tokens, head_dim) = self.rows_cols(x);
        if head_dim % 2 != 0 || cos.len() != tokens * head_dim / 2 || sin.len() != cos.len() {
            return Err(Error::invalid(
                "rotary",
                format!(
                    "x is {}x{} but rotation tables hold {} pairs",
                    tokens,
                    head_dim,
                    cos.len()
                ),
            ));
        }
        let mut out = vec![T::ZERO; tokens * head_dim];
        kn::rotate_pairs(&self.nodes[x.0].data, &cos, &sin, &mut out, tokens, head_dim);
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(out, shape);
        self.ops.push(Op::Rotary { x, out: id, cos, sin, tokens, head_dim });
        Ok(id)
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of {rows}", start + len),
            ));
        }
        let data = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let id = self.push_node(data, vec![len, cols]);
        self.ops.push(Op::SliceRows { x, out: id, start, len, cols });
        Ok(id)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let (_, cols) = self.rows_cols(parts[0]);
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            sizes.push(r);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let total: usize = sizes.iter().sum();
        let id = self.push_node(data, vec![total, cols]);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out: id, sizes, cols });
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, total_cols) = self.rows_cols(x);
        if start + len > total_cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("cols {start}..{} out of {total_cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * total_cols + start..r * total_cols + start + len]);
        }
        let id = self.push_node(data, vec![rows, len]);
        self.ops.push(Op::SliceCols { x, out: id, start, len, rows, total_cols });
        Ok(id)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts"));
        }
        let (rows, _) = self.rows_cols(parts[0]);
        let mut sizes = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            sizes.push(c);
        }
        let total: usize = sizes.iter().sum();
        let mut data = vec![T::ZERO; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let c = sizes[pi];
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
                off += c;
            }
        }
        let id = self.push_node(data, vec![rows, total]);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: id, sizes, rows });
        Ok(id)
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let (rows, cols) = self.rows_cols(x);
        let mut out = vec![T::ZERO; rows * cols];
        kn::transpose(&self.nodes[x.0].data, &mut out, rows, cols);
        let id = self.push_node(out, vec![cols, rows]);
        self.ops.push(Op::Transpose { x, out: id, rows, cols });
        id
    }

    /// Same data under a new equal-volume shape.
    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Reshape { x, out: id });
        Ok(id)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        let id = self.push_node(vec![acc], vec![]);
        self.ops.push(Op::Sum { x, out: id });
        id
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, x: VarId, target: &Tensor<T>) -> Result<VarId> {
        if self.nodes[x.0].data.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "mse_const",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_f64(target.len() as f64);
        let mut acc = T::ZERO;
        for (&a, &b) in self.nodes[x.0].data.iter().zip(target.data()) {
            let d = a - b;
            acc += d * d;
        }
        let id = self.push_node(vec![acc / n], vec![]);
        self.ops.push(Op::MseConst {
            x,
            target: Arc::new(target.data().to_vec()),
            out: id,
        });
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────

    fn grad_mut(&mut self, id: VarId) -> &mut Vec<T> {
        let len = self.nodes[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
    }

    /// Reverse pass from a scalar output node. Gradients accumulate into
    /// every node reachable from `out`, parameters included.
    pub fn backward(&mut self, out: VarId) -> Result<()> {
        if self.nodes[out.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", self.nodes[out.0].shape),
            ));
        }
        if !self.nodes[out.0].data[0].is_finite_s() {
            return Err(Error::NonFinite { op: "backward", index: 0 });
        }
        self.grad_mut(out).fill(T::ONE);

        for oi in (0..self.ops.len()).rev() {
            let out_id = self.op_out(oi);
            let g = match self.grads[out_id.0].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_op(oi, &g);
            self.grads[out_id.0] = Some(g);
        }
        Ok(())
    }

    fn op_out(&self, oi: usize) -> VarId {
        match &self.ops[oi] {
            Op::Linear { out, .. }
            | Op::Matmul { out, .. }
            | Op::MatmulNT { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::RowScale { out, .. }
            | Op::Modulate { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::MaskedSoftmax { out, .. }
            | Op::MaskedValueSum { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Silu { out, .. }
            | Op::Rotary { out, .. }
            | Op::SliceRows { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Transpose { out, .. }
            | Op::Reshape { out, .. }
            | Op::Sum { out, .. }
            | Op::MseConst { out, .. } => *out,
        }
    }

    fn backprop_op(&mut self, oi: usize, g: &[T]) {
        // Split borrows: node data is read-only here, gradient buffers are
        // the only mutable state.
        let Tape { nodes, ops, grads, .. } = self;
        let data = |id: VarId| -> &[T] { &nodes[id.0].data };
        fn gbuf<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: VarId,
        ) -> &'a mut Vec<T> {
            let len = nodes[id.0].data.len();
            grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
        }

        match &ops[oi] {
            &Op::Linear { x, w, b, m, k, n, .. } => {
                // dx = g @ w^T, computed against the transposed weight so
                // the inner loop is element-wise
                let mut wt = vec![T::ZERO; k * n];
                kn::transpose(data(w), &mut wt, k, n);
                kn::matmul_acc(g, &wt, gbuf(grads, nodes, x), m, n, k);
                kn::matmul_tn_acc(data(x), g, gbuf(grads, nodes, w), m, k, n);
                let gb = gbuf(grads, nodes, b);
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
            }
            &Op::Matmul { a, b, m, k, n, .. } => {
                let mut bt = vec![T::ZERO; k * n];
                kn::transpose(data(b), &mut bt, k, n);
                kn::matmul_acc(g, &bt, gbuf(grads, nodes, a), m, n, k);
                kn::matmul_tn_acc(data(a), g, gbuf(grads, nodes, b), m, k, n);
            }
            &Op::MatmulNT { a, b, m, k, n, .. } => {
                // out = A B^T: dA = G B, dB = G^T A
                kn::matmul_acc(g, data(b), gbuf(grads, nodes, a), m, n, k);
                kn::matmul_tn_acc(g, data(a), gbuf(grads, nodes, b), m, n, k);
            }
            &Op::Add { a, b, .. } => {
                let ga = gbuf(grads, nodes, a);
                for (gv, &gi) in ga.iter_mut().zip(g) {
                    *gv += gi;
                }
                let gb = gbuf(grads, nodes, b);
                for (gv, &gi) in gb.iter_mut().zip(g) {
                    *gv += gi;
                }
            }
            &Op::Sub { a, b, .. } => {
                let ga = gbuf(grads, nodes, a);
                for (gv, &gi) in ga.iter_mut().zip(g) {
                    *gv += gi;
                }
                let gb = gbuf(grads, nodes, b);
                for (gv, &gi) in gb.iter_mut().zip(g) {
                    *gv -= gi;
                }
            }
            &Op::Mul { a, b, .. } => {
                {
                    let bd = data(b);
                    let ga = gbuf(grads, nodes, a);
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let ad = data(a);
                let gb = gbuf(grads, nodes, b);
                for i in 0..gb.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            &Op::Scale { x, c, .. } => {
                let gx = gbuf(grads, nodes, x);
                for (gv, &gi) in gx.iter_mut().zip(g) {
                    *gv += gi * c;
                }
            }
            &Op::RowScale { x, s, rows, cols, .. } => {
                {
                    let sd = data(s);
                    let gx = gbuf(grads, nodes, x);
                    for t in 0..rows {
                        for j in 0..cols {
                            gx[t * cols + j] += g[t * cols + j] * sd[t];
                        }
                    }
                }
                let xd = data(x);
                let gs = gbuf(grads, nodes, s);
                for t in 0..rows {
                    let mut acc = T::ZERO;
                    for j in 0..cols {
                        acc += g[t * cols + j] * xd[t * cols + j];
                    }
                    gs[t] += acc;
                }
            }
            &Op::Modulate { x, scale, shift, rows, cols, .. } => {
                {
                    let sc = data(scale);
                    let gx = gbuf(grads, nodes, x);
                    for t in 0..rows {
                        for j in 0..cols {
                            gx[t * cols + j] += g[t * cols + j] * (T::ONE + sc[j]);
                        }
                    }
                }
                {
                    let xd = data(x);
                    let gsc = gbuf(grads, nodes, scale);
                    for t in 0..rows {
                        for j in 0..cols {
                            gsc[j] += g[t * cols + j] * xd[t * cols + j];
                        }
                    }
                }
                let gsh = gbuf(grads, nodes, shift);
                for t in 0..rows {
                    for j in 0..cols {
                        gsh[j] += g[t * cols + j];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rows, cols, mean, rstd, .. } => {
                let (x, gamma, beta, rows, cols) = (*x, *gamma, *beta, *rows, *cols);
                let nc = T::from_f64(cols as f64);
                {
                    let xd = data(x);
                    let gam = data(gamma);
                    let gx = gbuf(grads, nodes, x);
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for j in 0..cols {
                            let xhat = (xd[r * cols + j] - mu) * rs;
                            let dxhat = g[r * cols + j] * gam[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / nc;
                        let m2 = sum_dxhat_xhat / nc;
                        for j in 0..cols {
                            let xhat = (xd[r * cols + j] - mu) * rs;
                            let dxhat = g[r * cols + j] * gam[j];
                            gx[r * cols + j] += rs * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                {
                    let xd = data(x);
                    let ggam = gbuf(grads, nodes, gamma);
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        for j in 0..cols {
                            let xhat = (xd[r * cols + j] - mu) * rs;
                            ggam[j] += g[r * cols + j] * xhat;
                        }
                    }
                }
                let gbeta = gbuf(grads, nodes, beta);
                for r in 0..rows {
                    for j in 0..cols {
                        gbeta[j] += g[r * cols + j];
                    }
                }
            }
            Op::MaskedSoftmax { logits, out, rows, cols, mask } => {
                let (logits, out, rows, cols) = (*logits, *out, *rows, *cols);
                let p = data(out);
                let gl = {
                    let len = nodes[logits.0].data.len();
                    grads[logits.0].get_or_insert_with(|| vec![T::ZERO; len])
                };
                for r in 0..rows {
                    let mut dot = T::ZERO;
                    for j in 0..cols {
                        if mask.allowed(r, j) {
                            dot += g[r * cols + j] * p[r * cols + j];
                        }
                    }
                    for j in 0..cols {
                        if mask.allowed(r, j) {
                            gl[r * cols + j] += p[r * cols + j] * (g[r * cols + j] - dot);
                        }
                    }
                }
            }
            Op::MaskedValueSum { probs, values, m, n, d, mask, .. } => {
                let (probs, values, m, n, d) = (*probs, *values, *m, *n, *d);
                {
                    // dP = G @ V^T computed densely; blocked entries are
                    // never read by the masked-softmax backward
                    let mut vt = vec![T::ZERO; n * d];
                    kn::transpose(data(values), &mut vt, n, d);
                    let gp = gbuf(grads, nodes, probs);
                    kn::matmul_acc(g, &vt, gp, m, d, n);
                }
                let pd = data(probs);
                let gv = gbuf(grads, nodes, values);
                for i in 0..m {
                    for j in 0..n {
                        if !mask.allowed(i, j) {
                            continue;
                        }
                        let p = pd[i * n + j];
                        for c in 0..d {
                            gv[j * d + c] += p * g[i * d + c];
                        }
                    }
                }
            }
            &Op::Sigmoid { x, out } => {
                let y = data(out);
                let gx = gbuf(grads, nodes, x);
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (T::ONE - y[i]);
                }
            }
            &Op::Silu { x, .. } => {
                let xd = data(x);
                let gx = gbuf(grads, nodes, x);
                for i in 0..gx.len() {
                    let s = kn::sigmoid(xd[i]);
                    gx[i] += g[i] * (s + xd[i] * s * (T::ONE - s));
                }
            }
            Op::Rotary { x, cos, sin, tokens, head_dim, .. } => {
                let (x, tokens, head_dim) = (*x, *tokens, *head_dim);
                let mut dx = vec![T::ZERO; tokens * head_dim];
                kn::rotate_pairs_inv(g, cos, sin, &mut dx, tokens, head_dim);
                let gx = gbuf(grads, nodes, x);
                for i in 0..gx.len() {
                    gx[i] += dx[i];
                }
            }
            &Op::SliceRows { x, start, len, cols, .. } => {
                let gx = gbuf(grads, nodes, x);
                for i in 0..len * cols {
                    gx[start * cols + i] += g[i];
                }
            }
            Op::ConcatRows { parts, sizes, cols, .. } => {
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let n = sizes[pi] * cols;
                    let gp = gbuf(grads, nodes, p);
                    for i in 0..n {
                        gp[i] += g[off + i];
                    }
                    off += n;
                }
            }
            &Op::SliceCols { x, start, len, rows, total_cols, .. } => {
                let gx = gbuf(grads, nodes, x);
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * total_cols + start + j] += g[r * len + j];
                    }
                }
            }
            Op::ConcatCols { parts, sizes, rows, .. } => {
                let rows = *rows;
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let c = sizes[pi];
                    let gp = gbuf(grads, nodes, p);
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + off + j];
                        }
                    }
                    off += c;
                }
            }
            &Op::Transpose { x, rows, cols, .. } => {
                let gx = gbuf(grads, nodes, x);
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
            &Op::Reshape { x, .. } => {
                let gx = gbuf(grads, nodes, x);
                for (gv, &gi) in gx.iter_mut().zip(g) {
                    *gv += gi;
                }
            }
            &Op::Sum { x, .. } => {
                let gx = gbuf(grads, nodes, x);
                for gv in gx.iter_mut() {
                    *gv += g[0];
                }
            }
            Op::MseConst { x, target, .. } => {
                let x = *x;
                let n = T::from_f64(target.len() as f64);
                let two = T::from_f64(2.0);
                let xd = data(x);
                let gx = {
                    let len = nodes[x.0].data.len();
                    grads[x.0].get_or_insert_with(|| vec![T::ZERO; len])
                };
                for i in 0..gx.len() {
                    gx[i] += g[0] * two * (xd[i] - target[i]) / n;
                }
            }
        }
    }

    /// Re-execute every recorded op from the leaf values and compare each
    /// node's stored data bit for bit. Returns the first mismatching op
    /// index, or `None` when the replay is identical.
    pub fn replay_check(&self) -> Result<Option<usize>> {
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let get = |scratch: &Vec<Option<Vec<T>>>, id: VarId| -> Vec<T> {
            scratch[id.0]
                .clone()
                .unwrap_or_else(|| self.nodes[id.0].data.clone())
        };
        for (oi, op) in self.ops.iter().enumerate() {
            let out_id = self.op_out(oi);
            let expected = &self.nodes[out_id.0].data;
            let recomputed: Vec<T> = match op {
                Op::Linear { x, w, b, m, k, n, .. } => {
                    let mut out = vec![T::ZERO; m * n];
                    kn::linear(&get(&scratch, *x), &get(&scratch, *w), &get(&scratch, *b), &mut out, *m, *k, *n);
                    out
                }
                Op::Matmul { a, b, m, k, n, .. } => {
                    let mut out = vec![T::ZERO; m * n];
                    kn::matmul(&get(&scratch, *a), &get(&scratch, *b), &mut out, *m, *k, *n);
                    out
                }
                Op::MatmulNT { a, b, m, k, n, .. } => {
                    let mut out = vec![T::ZERO; m * n];
                    kn::matmul_nt(&get(&scratch, *a), &get(&scratch, *b), &mut out, *m, *k, *n);
                    out
                }
                Op::Add { a, b, .. } => get(&scratch, *a)
                    .iter()
                    .zip(&get(&scratch, *b))
                    .map(|(&x, &y)| x + y)
                    .collect(),
                Op::Sub { a, b, .. } => get(&scratch, *a)
                    .iter()
                    .zip(&get(&scratch, *b))
                    .map(|(&x, &y)| x - y)
                    .collect(),
                Op::Mul { a, b, .. } => get(&scratch, *a)
                    .iter()
                    .zip(&get(&scratch, *b))
                    .map(|(&x, &y)| x * y)
                    .collect(),
                Op::Scale { x, c, .. } => get(&scratch, *x).iter().map(|&v| v * *c).collect(),
                Op::RowScale { x, s, rows, cols, .. } => {
                    let xd = get(&scratch, *x);
                    let sd = get(&scratch, *s);
                    let mut out = vec![T::ZERO; rows * cols];
                    for t in 0..*rows {
                        for j in 0..*cols {
                            out[t * cols + j] = xd[t * cols + j] * sd[t];
                        }
                    }
                    out
                }
                Op::Modulate { x, scale, shift, rows, cols, .. } => {
                    let xd = get(&scratch, *x);
                    let sc = get(&scratch, *scale);
                    let sh = get(&scratch, *shift);
                    let mut out = vec![T::ZERO; rows * cols];
                    for t in 0..*rows {
                        for j in 0..*cols {
                            out[t * cols + j] = xd[t * cols + j] * (T::ONE + sc[j]) + sh[j];
                        }
                    }
                    out
                }
                Op::LayerNorm { x, gamma, beta, rows, cols, eps, .. } => {
                    let xd = get(&scratch, *x);
                    let mut mean = vec![T::ZERO; *rows];
                    let mut rstd = vec![T::ZERO; *rows];
                    kn::layer_norm_stats(&xd, *rows, *cols, *eps, &mut mean, &mut rstd);
                    let mut out = vec![T::ZERO; rows * cols];
                    kn::layer_norm_apply(
                        &xd,
                        &get(&scratch, *gamma),
                        &get(&scratch, *beta),
                        &mean,
                        &rstd,
                        &mut out,
                        *rows,
                        *cols,
                    );
                    out
                }
                Op::MaskedSoftmax { logits, rows, cols, mask, .. } => {
                    let mut out = vec![T::ZERO; rows * cols];
                    kn::softmax_rows(&get(&scratch, *logits), &mut out, *rows, *cols, |q, k| {
                        mask.allowed(q, k)
                    })?;
                    out
                }
                Op::MaskedValueSum { probs, values, m, n, d, mask, .. } => {
                    let mut out = vec![T::ZERO; m * d];
                    kn::weighted_value_sum(
                        &get(&scratch, *probs),
                        &get(&scratch, *values),
                        &mut out,
                        *m,
                        *n,
                        *d,
                        |q, k| mask.allowed(q, k),
                    );
                    out
                }
                Op::Sigmoid { x, .. } => get(&scratch, *x).iter().map(|&v| kn::sigmoid(v)).collect(),
                Op::Silu { x, .. } => get(&scratch, *x).iter().map(|&v| kn::silu(v)).collect(),
                Op::Rotary { x, cos, sin, tokens, head_dim, .. } => {
                    let mut out = vec![T::ZERO; tokens * head_dim];
                    kn::rotate_pairs(&get(&scratch, *x), cos, sin, &mut out, *tokens, *head_dim);
                    out
                }
                Op::SliceRows { x, start, len, cols, .. } => {
                    get(&scratch, *x)[start * cols..(start + len) * cols].to_vec()
                }
                Op::ConcatRows { parts, .. } => {
                    let mut out = Vec::new();
                    for &p in parts {
                        out.extend_from_slice(&get(&scratch, p));
                    }
                    out
                }
                Op::SliceCols { x, start, len, rows, total_cols, .. } => {
                    let xd = get(&scratch, *x);
                    let mut out = Vec::with_capacity(rows * len);
                    for r in 0..*rows {
                        out.extend_from_slice(&xd[r * total_cols + start..r * total_cols + start + len]);
                    }
                    out
                }
                Op::ConcatCols { parts, sizes, rows, .. } => {
                    let total: usize = sizes.iter().sum();
                    let mut out = vec![T::ZERO; rows * total];
                    for r in 0..*rows {
                        let mut off = 0;
                        for (pi, &p) in parts.iter().enumerate() {
                            let c = sizes[pi];
                            let pd = get(&scratch, p);
                            out[r * total + off..r * total + off + c]
                                .copy_from_slice(&pd[r * c..(r + 1) * c]);
                            off += c;
                        }
                    }
                    out
                }
                Op::Transpose { x, rows, cols, .. } => {
                    let mut out = vec![T::ZERO; rows * cols];
                    kn::transpose(&get(&scratch, *x), &mut out, *rows, *cols);
                    out
                }
                Op::Reshape { x, .. } => get(&scratch, *x),
                Op::Sum { x, .. } => {
                    let mut acc = T::ZERO;
                    for &v in &get(&scratch, *x) {
                        acc += v;
                    }
                    vec![acc]
                }
                Op::MseConst { x, target, .. } => {
                    let xd = get(&scratch, *x);
                    let n = T::from_f64(target.len() as f64);
                    let mut acc = T::ZERO;
                    for (&a, &b) in xd.iter().zip(target.iter()) {
                        let d = a - b;
                        acc += d * d;
                    }
                    vec![acc / n]
                }
            };
            if recomputed.len() != expected.len()
                || recomputed
                    .iter()
                    .zip(expected)
                    .any(|(a, b)| a.to_f64().to_bits() != b.to_f64().to_bits())
            {
                return Ok(Some(oi));
            }
            scratch[out_id.0] = Some(recomputed);
        }
        Ok(None)
    }
}
